mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;

use murf::anomaly::{
    build_bank, fuse_scores, gaussian_smooth, greedy_k_center, load_bank, run_ad, save_bank, score_map, score_source,
    build_banks, AdConfig, AnomalyError, Normalization,
};
use murf::encoder::Source;
use murf::{AnomalyMap, Backbone, EncoderSpec, FeatureMap, ImageTensor, ScaleSet};

use common::{bilinear_ref, k_center_ref, nn_ref, random_vec, rng};

fn random_map(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    FeatureMap::new(h, w, d, random_vec(r, h * w * d, -1.0, 1.0)).unwrap()
}

fn crop(map: &FeatureMap, y0: usize, x0: usize, h: usize, w: usize) -> FeatureMap {
    let mut data = Vec::with_capacity(h * w * map.dim);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            data.extend_from_slice(map.vector(y, x));
        }
    }
    FeatureMap::new(h, w, map.dim, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scores_follow_a_shifted_grid(seed in any::<u64>(), dy in 0..4usize, dx in 0..4usize) {
        let mut r = rng(seed);
        let bank = build_bank(1.0, &[random_map(&mut r, 5, 5, 6)], 1.0, Normalization::None).unwrap();
        let big = random_map(&mut r, 8, 8, 6);
        let full = score_map(&bank, &big).unwrap();
        let part = score_map(&bank, &crop(&big, dy, dx, 4, 4)).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let a = part.scores[y * 4 + x];
                let b = full.scores[(y + dy) * 8 + x + dx];
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn smaller_coresets_never_lower_scores(seed in any::<u64>(), f1 in 0.05f64..1.0, f2 in 0.05f64..1.0) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let mut r = rng(seed);
        let nominal = [random_map(&mut r, 6, 6, 4), random_map(&mut r, 6, 6, 4)];
        let query = random_map(&mut r, 5, 5, 4);
        let small = build_bank(1.0, &nominal, lo, Normalization::None).unwrap();
        let large = build_bank(1.0, &nominal, hi, Normalization::None).unwrap();
        let a = score_map(&small, &query).unwrap();
        let b = score_map(&large, &query).unwrap();
        for (s, l) in a.scores.iter().zip(&b.scores) {
            prop_assert!(s >= l);
        }
    }

    #[test]
    fn fused_scores_are_linear(seed in any::<u64>(), a in 0.0f32..4.0) {
        let mut r = rng(seed);
        let maps: Vec<AnomalyMap> = (0..3)
            .map(|i| AnomalyMap::new(2 + i, 3 + i, random_vec(&mut r, (2 + i) * (3 + i), 0.0, 1.0)).unwrap())
            .collect();
        let scaled: Vec<AnomalyMap> = maps
            .iter()
            .map(|m| AnomalyMap::new(m.height, m.width, m.scores.iter().map(|v| v * a).collect()).unwrap())
            .collect();
        let x = fuse_scores(&maps, 9, 7).unwrap();
        let y = fuse_scores(&scaled, 9, 7).unwrap();
        for (u, v) in x.scores.iter().zip(&y.scores) {
            prop_assert!((u * a - v).abs() <= 1e-5 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn nearest_distances_match_exhaustive_search() {
    let mut r = rng(3);
    for normalization in [Normalization::None, Normalization::L2] {
        let nominal = random_map(&mut r, 7, 7, 9);
        let query = random_map(&mut r, 4, 6, 9);
        let bank = build_bank(1.0, std::slice::from_ref(&nominal), 1.0, normalization).unwrap();
        let got = score_map(&bank, &query).unwrap();
        let unit = |v: &[f32]| -> Vec<f32> {
            v.chunks(9)
                .flat_map(|c| {
                    let n = c.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                    c.iter().map(move |x| (*x as f64 / n) as f32)
                })
                .collect()
        };
        let want = match normalization {
            Normalization::None => nn_ref(&nominal.data, &query.data, 9),
            Normalization::L2 => nn_ref(&unit(&nominal.data), &unit(&query.data), 9),
        };
        for (g, w) in got.scores.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5, "{normalization:?}: {g} vs {w}");
        }
    }
}

#[test]
fn l2_scores_ignore_query_magnitude() {
    let mut r = rng(6);
    let bank = build_bank(1.0, &[random_map(&mut r, 4, 4, 5)], 1.0, Normalization::L2).unwrap();
    let query = random_map(&mut r, 3, 3, 5);
    let mut louder = query.clone();
    louder.data.iter_mut().for_each(|v| *v *= 7.5);
    let a = score_map(&bank, &query).unwrap();
    let b = score_map(&bank, &louder).unwrap();
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn coreset_is_the_greedy_selection() {
    let mut r = rng(10);
    let nominal = random_map(&mut r, 6, 5, 3);
    let bank = build_bank(1.0, std::slice::from_ref(&nominal), 0.2, Normalization::None).unwrap();
    let mut want = k_center_ref(&nominal.data, 3, 6);
    want.sort_unstable();
    assert_eq!(bank.coreset_indices().unwrap(), &want[..]);
    assert_eq!(bank.active_len(), 6);
    assert_eq!(bank.len(), 30);
}

#[test]
fn k_center_with_repeated_points_stays_distinct() {
    let vectors = [0.0f32, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    let idx = greedy_k_center(&vectors, 2, 4);
    assert_eq!(idx, vec![0, 1, 2, 3]);
    assert_eq!(idx, k_center_ref(&vectors, 2, 4));
}

#[test]
fn five_maps_average_pointwise() {
    let mut r = rng(12);
    let grids = [(1, 1), (2, 3), (4, 4), (5, 2), (7, 7)];
    let maps: Vec<AnomalyMap> = grids
        .iter()
        .map(|&(h, w)| AnomalyMap::new(h, w, random_vec(&mut r, h * w, 0.0, 2.0)).unwrap())
        .collect();
    let (oh, ow) = (11, 13);
    let fused = fuse_scores(&maps, oh, ow).unwrap();
    let ups: Vec<Vec<f64>> = maps.iter().map(|m| bilinear_ref(&m.scores, m.height, m.width, 1, oh, ow)).collect();
    for p in 0..oh * ow {
        let want = ups.iter().map(|u| u[p]).sum::<f64>() / 5.0;
        assert!((fused.scores[p] as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn smoothing_keeps_constants_and_flattens_peaks() {
    let flat = AnomalyMap::new(6, 9, vec![0.75; 54]).unwrap();
    let out = gaussian_smooth(&flat, 1.5).unwrap();
    assert!(out.scores.iter().all(|v| (v - 0.75).abs() < 1e-6));

    let mut spike = vec![0.0; 81];
    spike[40] = 1.0;
    let out = gaussian_smooth(&AnomalyMap::new(9, 9, spike).unwrap(), 1.0).unwrap();
    assert!(out.scores[40] < 1.0 && out.scores[41] > 0.0);
    assert!((out.scores.iter().sum::<f32>() - 1.0).abs() < 1e-4);
    assert!(matches!(gaussian_smooth(&flat, 0.0), Err(AnomalyError::BadSigma(_))));
}

fn toy_backbone(patch: usize) -> Backbone {
    Backbone::from_spec(EncoderSpec::toy(patch, 8, 5)).unwrap()
}

fn noise_image(seed: u64, side: usize) -> ImageTensor {
    let mut r = rng(seed);
    ImageTensor::new(side, side, 3, (0..side * side * 3).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn nominal_images_score_zero() {
    let backbone = toy_backbone(4);
    let train = [noise_image(1, 48), noise_image(2, 48)];
    let sources: Vec<Source<'_>> = train.iter().map(Source::Image).collect();
    let config = AdConfig::new(ScaleSet::relative(&[0.5, 1.0]).unwrap());
    let banks = build_banks(&backbone, &sources, &config).unwrap();
    for s in &sources {
        let outcome = score_source(&backbone, &banks, *s, &config).unwrap();
        assert!(outcome.map.scores.iter().all(|&v| v == 0.0));
        assert_eq!(outcome.image_score, 0.0);
    }
}

#[test]
fn five_scale_pipeline_covers_the_image() {
    let backbone = toy_backbone(4);
    let train = [noise_image(3, 40), noise_image(4, 40)];
    let test = [noise_image(5, 40), noise_image(6, 40)];
    let train_src: Vec<Source<'_>> = train.iter().map(Source::Image).collect();
    let test_src: Vec<Source<'_>> = test.iter().map(Source::Image).collect();
    let mut config = AdConfig::new(ScaleSet::relative(&[0.5, 0.75, 1.0, 1.25, 1.5]).unwrap());
    config.coreset_fraction = 0.5;
    config.smoothing_sigma = Some(2.0);
    let outcomes = run_ad(&backbone, &train_src, &test_src, &config).unwrap();
    assert_eq!(outcomes.len(), 2);
    for o in &outcomes {
        assert_eq!(o.per_scale.len(), 5);
        assert_eq!((o.map.height, o.map.width), (40, 40));
        assert!(o.map.scores.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(o.image_score > 0.0);
        assert_eq!(o.image_score, o.map.max());
    }
    let grids: Vec<usize> = outcomes[0].per_scale.iter().map(|m| m.height).collect();
    assert_eq!(grids, vec![5, 8, 10, 13, 15]);
}

#[test]
fn banks_reload_exactly() {
    let mut r = rng(14);
    let bank = build_bank(0.75, &[random_map(&mut r, 5, 4, 3)], 0.4, Normalization::L2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut extra = BTreeMap::new();
    extra.insert("encoder".to_string(), "toy".to_string());
    save_bank(dir.path(), 2, &bank, &extra).unwrap();
    let (loaded, meta) = load_bank(dir.path(), 2).unwrap();
    assert_eq!(loaded, bank);
    assert_eq!(meta["encoder"], "toy");
}

#[test]
fn bank_dims_must_agree() {
    let mut r = rng(15);
    let maps = [random_map(&mut r, 2, 2, 3), random_map(&mut r, 2, 2, 4)];
    assert!(matches!(
        build_bank(1.0, &maps, 1.0, Normalization::None),
        Err(AnomalyError::DimMismatch { expected: 3, found: 4 })
    ));
    assert!(matches!(build_bank(1.0, &maps[..1], 0.0, Normalization::None), Err(AnomalyError::BadFraction(_))));
}
