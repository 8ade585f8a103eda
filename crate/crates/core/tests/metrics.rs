mod common;

use proptest::prelude::*;

use murf::metrics::{au_pro, connected_components, miou, rmse, MetricsError, ProSample};

use common::{au_pro_ref, components_ref};

/// One image: integer-valued scores (so cubic transforms stay exact in f32)
/// and a defect mask with at least one defect and one clean pixel.
fn scored_image() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<bool>)> {
    (2..7usize, 2..7usize).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            Just(h),
            Just(w),
            prop::collection::vec((0..40u32).prop_map(|v| v as f32), n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
            0..n,
        )
            .prop_filter("one pixel cannot be both", |t| t.4 != t.5)
            .prop_map(|(h, w, s, mut m, pos, neg)| {
                m[pos] = true;
                m[neg] = false;
                (h, w, s, m)
            })
    })
}

fn samples(images: &[(usize, usize, Vec<f32>, Vec<bool>)]) -> Vec<ProSample<'_>> {
    images
        .iter()
        .map(|(h, w, s, m)| ProSample {
            height: *h,
            width: *w,
            scores: s,
            defect: m,
        })
        .collect()
}

fn miou_ref(pred: &[u32], gt: &[u32], classes: u32, ignore: Option<u32>) -> f64 {
    let kept: Vec<(u32, u32)> = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| Some(**p) != ignore && Some(**g) != ignore)
        .map(|(p, g)| (*p, *g))
        .collect();
    let mut ious = Vec::new();
    for c in 0..classes {
        let inter = kept.iter().filter(|(p, g)| *p == c && *g == c).count();
        let union = kept.iter().filter(|(p, g)| *p == c || *g == c).count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    100.0 * ious.iter().sum::<f64>() / ious.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn au_pro_matches_exhaustive_thresholds(images in prop::collection::vec(scored_image(), 1..4), limit in 0.05f64..=1.0) {
        let got = au_pro(&samples(&images), limit).unwrap();
        let want = au_pro_ref(&images, limit);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn au_pro_depends_only_on_score_order(images in prop::collection::vec(scored_image(), 1..4), limit in 0.05f64..=1.0) {
        let warped: Vec<_> = images
            .iter()
            .map(|(h, w, s, m)| (*h, *w, s.iter().map(|v| v * v * v + 2.0 * v - 100.0).collect(), m.clone()))
            .collect();
        let a = au_pro(&samples(&images), limit).unwrap();
        let b = au_pro(&samples(&warped), limit).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn raising_a_defect_score_never_hurts(images in prop::collection::vec(scored_image(), 1..3), pick in any::<prop::sample::Index>(), lift in 1..30u32) {
        let defects: Vec<(usize, usize)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, (_, _, _, m))| m.iter().enumerate().filter(|(_, d)| **d).map(move |(p, _)| (i, p)))
            .collect();
        let (i, p) = defects[pick.index(defects.len())];
        let mut raised = images.clone();
        raised[i].2[p] += lift as f32;
        for limit in [0.05, 0.3, 1.0] {
            let before = au_pro(&samples(&images), limit).unwrap();
            let after = au_pro(&samples(&raised), limit).unwrap();
            prop_assert!(after >= before - 1e-12, "limit {}: {} -> {}", limit, before, after);
            prop_assert!((after - au_pro_ref(&raised, limit)).abs() < 1e-9);
        }
    }

    #[test]
    fn components_match_flood_fill((h, w) in (1..9usize, 1..9usize), bits in prop::collection::vec(any::<bool>(), 64)) {
        let mask = &bits[..h * w];
        let (labels, count) = connected_components(mask, h, w);
        let (want, want_count) = components_ref(mask, h, w);
        prop_assert_eq!(count, want_count);
        // Both number regions in raster order of their first pixel.
        prop_assert_eq!(labels.iter().map(|&l| l as usize).collect::<Vec<_>>(), want);
    }

    #[test]
    fn miou_matches_set_counts(
        pairs in prop::collection::vec((0..5u32, 0..5u32), 1..80),
        ignore in prop::option::of(0..5u32),
    ) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let any_kept = pred.iter().zip(&gt).any(|(p, g)| Some(*p) != ignore && Some(*g) != ignore);
        match miou(&pred, &gt, 5, ignore) {
            Ok(v) => prop_assert!((v - miou_ref(&pred, &gt, 5, ignore)).abs() < 1e-9),
            Err(e) => {
                prop_assert!(!any_kept);
                prop_assert_eq!(e, MetricsError::NoValidPixels);
            }
        }
    }

    #[test]
    fn miou_ignores_class_names(
        pairs in prop::collection::vec((0..4u32, 0..4u32), 1..60),
        perm in Just(vec![0u32, 1, 2, 3]).prop_shuffle(),
    ) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = pairs.into_iter().unzip();
        let rename = |v: &[u32]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
        let a = miou(&pred, &gt, 4, None).unwrap();
        let b = miou(&rename(&pred), &rename(&gt), 4, None).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn rmse_scales_with_the_data(
        pairs in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..50),
        exp in -4i32..5,
    ) {
        let a = 2f32.powi(exp);
        let (pred, gt): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let base = rmse(&pred, &gt, None).unwrap();
        let scaled = rmse(
            &pred.iter().map(|v| v * a).collect::<Vec<_>>(),
            &gt.iter().map(|v| v * a).collect::<Vec<_>>(),
            None,
        ).unwrap();
        prop_assert!((scaled - a as f64 * base).abs() <= 1e-12 * (1.0 + scaled));
    }
}

#[test]
fn rmse_skips_invalid_pixels() {
    let pred = [1.0, 2.0, 100.0];
    let gt = [1.0, 4.0, 0.0];
    let v = rmse(&pred, &gt, Some(&[true, true, false])).unwrap();
    assert!((v - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(rmse(&pred, &gt, Some(&[false; 3])), Err(MetricsError::NoValidPixels));
}

#[test]
fn au_pro_needs_both_kinds_of_pixel() {
    let scores = [0.1f32, 0.2, 0.3, 0.4];
    let all = [true; 4];
    let none = [false; 4];
    let sample = |defect| ProSample {
        height: 2,
        width: 2,
        scores: &scores,
        defect,
    };
    assert_eq!(au_pro(&[sample(&none)], 0.3), Err(MetricsError::NoDefectRegions));
    assert_eq!(au_pro(&[sample(&all)], 0.3), Err(MetricsError::NoNegatives));
    let mixed = [true, false, false, false];
    assert_eq!(au_pro(&[sample(&mixed)], 0.0), Err(MetricsError::BadLimit(0.0)));
}

#[test]
fn diagonal_pixels_form_one_region() {
    let mask = [true, false, false, true];
    assert_eq!(connected_components(&mask, 2, 2).1, 1);
}
