mod common;

use proptest::prelude::*;

use murf::fusion::{concat_layers, fuse, pca_project, FusionError};
use murf::pyramid::resize_bilinear;
use murf::FeatureMap;

use common::{normalize_component, pca_scores_ref, rng};
use rand::Rng;

/// k maps with distinct scales, a shared dim, and independent grids.
fn scale_maps() -> impl Strategy<Value = Vec<(f64, FeatureMap)>> {
    (1..=5usize, 1..=9usize).prop_flat_map(|(k, d)| {
        prop::collection::vec((1..=6usize, 1..=6usize), k).prop_flat_map(move |grids| {
            let sizes: Vec<usize> = grids.iter().map(|(h, w)| h * w * d).collect();
            let total: usize = sizes.iter().sum();
            (Just(grids), prop::collection::vec(-5.0f32..5.0, total), Just(d))
        })
    })
    .prop_map(|(grids, data, d)| {
        let mut offset = 0;
        grids
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| {
                let chunk = data[offset..offset + h * w * d].to_vec();
                offset += h * w * d;
                (0.3 + 0.2 * i as f64, FeatureMap::new(h, w, d, chunk).unwrap())
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blocks_slice_back_to_upsampled_sources(maps in scale_maps()) {
        let fused = fuse(&maps, None).unwrap();
        let d = maps[0].1.dim;
        prop_assert_eq!(fused.total_dim, maps.len() * d);
        let gh = maps.iter().map(|(_, m)| m.grid_h).max().unwrap();
        let gw = maps.iter().map(|(_, m)| m.grid_w).max().unwrap();
        prop_assert_eq!((fused.grid_h, fused.grid_w), (gh, gw));
        for (b, (scale, m)) in maps.iter().enumerate() {
            prop_assert_eq!(fused.blocks[b].scale, *scale);
            let expect = resize_bilinear(&m.data, m.grid_h, m.grid_w, d, gh, gw).unwrap();
            prop_assert_eq!(fused.block(b), expect);
        }
    }

    #[test]
    fn input_order_is_irrelevant(maps in scale_maps(), rotate in 0usize..5) {
        let mut shuffled = maps.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rotate % n);
        shuffled.swap(0, n - 1);
        prop_assert_eq!(fuse(&maps, None).unwrap(), fuse(&shuffled, None).unwrap());
    }

    #[test]
    fn explicit_target_sets_the_grid(maps in scale_maps(), th in 1..12usize, tw in 1..12usize) {
        let fused = fuse(&maps, Some((th, tw))).unwrap();
        prop_assert_eq!((fused.grid_h, fused.grid_w), (th, tw));
        prop_assert_eq!(fused.data.len(), th * tw * fused.total_dim);
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a random square matrix.
fn random_rotation(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Features with clearly separated variances along random directions.
fn anisotropic_grid(positions: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let rot = random_rotation(d, seed ^ 0x55);
    let mut out = Vec::with_capacity(positions * d);
    for _ in 0..positions {
        let latent: Vec<f64> = (0..d).map(|k| r.gen_range(-1.0..1.0) * 4.0 / (1.0 + k as f64).powi(2)).collect();
        for row in &rot {
            out.push((0.7 + row.iter().zip(&latent).map(|(a, b)| a * b).sum::<f64>()) as f32);
        }
    }
    out
}

#[test]
fn pca_matches_power_iteration() {
    for seed in 0..8 {
        let (gh, gw, d) = (9, 7, 6);
        let data = anisotropic_grid(gh * gw, d, seed);
        let img = pca_project(gh, gw, d, &data, 3, None).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (gh, gw, 3));
        let reference = pca_scores_ref(&data, d, 3);
        for (c, scores) in reference.iter().enumerate() {
            let want = normalize_component(scores);
            for (p, w) in want.iter().enumerate() {
                let got = img.data()[p * 3 + c] as f64;
                assert!((got - w).abs() < 1e-4, "seed {seed} component {c} position {p}: {got} vs {w}");
            }
        }
    }
}

#[test]
fn pca_is_rotation_invariant() {
    for seed in 0..8 {
        let (gh, gw, d) = (8, 8, 5);
        let data = anisotropic_grid(gh * gw, d, 100 + seed);
        let rot = random_rotation(d, 200 + seed);
        let rotated: Vec<f32> = data
            .chunks(d)
            .flat_map(|x| rot.iter().map(move |row| row.iter().zip(x).map(|(a, b)| a * *b as f64).sum::<f64>() as f32))
            .collect();
        let a = pca_project(gh, gw, d, &data, 3, None).unwrap();
        let b = pca_project(gh, gw, d, &rotated, 3, None).unwrap();
        for c in 0..3 {
            let col = |img: &murf::ImageTensor| -> Vec<f32> { (0..gh * gw).map(|p| img.data()[p * 3 + c]).collect() };
            let (x, y) = (col(&a), col(&b));
            let same = x.iter().zip(&y).all(|(u, v)| (u - v).abs() < 1e-4);
            let flipped = x.iter().zip(&y).all(|(u, v)| (u - (1.0 - v)).abs() < 1e-4);
            assert!(same || flipped, "seed {seed} component {c}");
        }
    }
}

#[test]
fn points_on_a_line_keep_their_order() {
    let (gh, gw, d) = (3, 4, 5);
    let dir = [0.3f32, -1.0, 0.5, 2.0, 0.1];
    let ts: Vec<f32> = (0..gh * gw).map(|i| ((i * 5) % 12) as f32 - 4.0).collect();
    let data: Vec<f32> = ts.iter().flat_map(|t| dir.iter().map(move |v| 1.0 + t * v)).collect();
    let img = pca_project(gh, gw, d, &data, 1, None).unwrap();
    assert_eq!(img.channels(), 1);
    let out = img.data();
    let reference = normalize_component(&pca_scores_ref(&data, d, 1)[0]);
    for i in 0..ts.len() {
        assert!((out[i] as f64 - reference[i]).abs() < 1e-4);
    }
    // Either orientation is valid, but one of them must hold for every pair.
    let pairs: Vec<(usize, usize)> = (0..ts.len())
        .flat_map(|i| (0..ts.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| ts[i] < ts[j])
        .collect();
    let rising = pairs.iter().all(|&(i, j)| out[i] < out[j]);
    let falling = pairs.iter().all(|&(i, j)| out[i] > out[j]);
    assert!(rising || falling);
    let lo = ts.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = ts.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let ends: Vec<f32> = ts
        .iter()
        .zip(out)
        .filter(|(t, _)| **t == lo || **t == hi)
        .map(|(_, v)| *v)
        .collect();
    assert!(ends.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn random_grid_projects_into_unit_range() {
    let mut r = rng(4);
    let data: Vec<f32> = (0..10 * 10 * 8).map(|_| r.gen_range(-3.0..3.0)).collect();
    let img = pca_project(10, 10, 8, &data, 3, None).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (10, 10, 3));
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn constant_grid_is_degenerate() {
    let data = vec![0.25f32; 4 * 4 * 3];
    assert!(matches!(pca_project(4, 4, 3, &data, 2, None), Err(FusionError::Degenerate)));
}

#[test]
fn layers_then_scales_compose() {
    let mut r = rng(9);
    let mut per_scale = Vec::new();
    for (i, scale) in [0.5, 1.0, 1.5].into_iter().enumerate() {
        let side = 2 + i;
        let layers: Vec<FeatureMap> = [4u32, 8, 12]
            .into_iter()
            .map(|l| {
                let mut m = FeatureMap::new(side, side, 768, (0..side * side * 768).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
                m.layer_id = l;
                m
            })
            .collect();
        per_scale.push((scale, concat_layers(&layers).unwrap()));
    }
    assert!(per_scale.iter().all(|(_, m)| m.dim == 3 * 768));
    assert_eq!(fuse(&per_scale, None).unwrap().total_dim, 6912);
}
