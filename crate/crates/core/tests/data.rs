use diffnet_core::data::{
    channel_stats, decode_tile, encode_tile, generate_scene, read_mask, read_tile,
    sample_patch_offsets, sample_patches, standardize, write_mask, write_tile, BitemporalTile,
    Mask, SceneParams,
};
use diffnet_core::Tensor;
use proptest::prelude::*;

fn params(c: usize, size: usize) -> SceneParams {
    SceneParams {
        channels: c,
        height: size,
        width: size,
        ..SceneParams::default()
    }
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn tile_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.btt");
    let tile = generate_scene(&params(8, 64), 3).unwrap();
    write_tile(&tile, &path).unwrap();
    let back = read_tile(&path).unwrap();
    assert_eq!(bits(back.pre()), bits(tile.pre()));
    assert_eq!(bits(back.post()), bits(tile.post()));
    assert_eq!(back.mask(), tile.mask());
    assert_eq!(
        std::fs::metadata(&path).unwrap().len(),
        16 + 2 * 8 * 64 * 64 * 4 + 64 * 64
    );
}

#[test]
fn mask_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.btm");
    let m = Mask {
        height: 2,
        width: 3,
        values: vec![0, 1, 255, 1, 0, 0],
    };
    write_mask(&m, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 12 + 6);
    assert_eq!(read_mask(&path).unwrap(), m);
}

#[test]
fn missing_file_is_io_error() {
    let err = read_tile("/nonexistent/dir/none.btt").unwrap_err();
    assert!(matches!(err, diffnet_core::Error::Io { .. }));
}

#[test]
fn generation_is_deterministic() {
    let p = params(6, 64);
    let a = generate_scene(&p, 17).unwrap();
    let b = generate_scene(&p, 17).unwrap();
    assert_eq!(encode_tile(&a), encode_tile(&b));
    assert_ne!(
        encode_tile(&a),
        encode_tile(&generate_scene(&p, 18).unwrap())
    );
}

#[test]
fn no_scar_blobs_means_empty_mask() {
    let p = SceneParams {
        n_scar_blobs: 0,
        ..params(4, 64)
    };
    assert!(generate_scene(&p, 1)
        .unwrap()
        .mask()
        .iter()
        .all(|&v| v == 0));
}

#[test]
fn realized_burn_fraction_tracks_target() {
    let p = SceneParams {
        confuser_blobs: 0,
        ..params(1, 64)
    };
    let mean: f64 = (0..100)
        .map(|s| generate_scene(&p, s).unwrap().burn_fraction())
        .sum::<f64>()
        / 100.0;
    assert!((0.075..=0.225).contains(&mean), "mean burn fraction {mean}");
}

#[test]
fn invalid_params_rejected() {
    for p in [
        SceneParams {
            burn_fraction_target: 1.0,
            ..params(2, 32)
        },
        SceneParams {
            noise_sigma: -1.0,
            ..params(2, 32)
        },
        SceneParams {
            max_aspect: 0.5,
            ..params(2, 32)
        },
    ] {
        assert!(generate_scene(&p, 0).is_err());
    }
}

/// post − pre per channel at pixel `p` of a C×H×W tile.
fn shift(tile: &BitemporalTile, ch: usize, p: usize) -> f32 {
    let plane = tile.height() * tile.width();
    tile.post().data()[ch * plane + p] - tile.pre().data()[ch * plane + p]
}

#[test]
fn labels_follow_the_burn_offset() {
    let p = SceneParams {
        noise_sigma: 0.0,
        confuser_blobs: 3,
        ..params(8, 64)
    };
    let tile = generate_scene(&p, 5).unwrap();
    let plane = 64 * 64;
    // Reference shift per channel: the most common value outside the scar is the pure drift.
    let drift: Vec<f32> = (0..8)
        .map(|ch| {
            let mut v: Vec<f32> = (0..plane)
                .filter(|&i| tile.mask()[i] == 0)
                .map(|i| shift(&tile, ch, i))
                .collect();
            v.sort_by(f32::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let mut unburned_changed_max = 0;
    for i in 0..plane {
        let changed = (0..8)
            .filter(|&ch| (shift(&tile, ch, i) - drift[ch]).abs() > 1e-3)
            .count();
        if tile.mask()[i] == 1 {
            assert!(
                changed >= 6,
                "scar pixel {i} changed on only {changed} channels"
            );
        } else {
            unburned_changed_max = unburned_changed_max.max(changed);
        }
    }
    // confusers overlap at most three times, each touching 8/4 = 2 channels
    assert!(unburned_changed_max <= 6);
    assert!(
        unburned_changed_max > 0,
        "confusers should leave unlabeled change"
    );
}

#[test]
fn full_size_patch_returns_whole_tile() {
    let tile = generate_scene(&params(2, 64), 2).unwrap();
    let patches = sample_patches(&tile, 64, 3, 0.05, 9).unwrap();
    assert_eq!(patches.len(), 3);
    assert!(patches.iter().all(|p| *p == tile));
}

#[test]
fn patch_errors() {
    let tile = generate_scene(&params(2, 64), 2).unwrap();
    assert!(matches!(
        sample_patches(&tile, 96, 1, 0.0, 0),
        Err(diffnet_core::Error::Contract(_))
    ));
    assert!(sample_patches(&tile, 48, 1, 0.0, 0).is_err());
}

#[test]
fn offsets_in_bounds_and_balanced() {
    let p = SceneParams {
        n_scar_blobs: 3,
        ..params(2, 256)
    };
    let tile = generate_scene(&p, 4).unwrap();
    let n = 40;
    let offsets = sample_patch_offsets(&tile, 64, n, 0.05, 11).unwrap();
    assert!(offsets.iter().all(|&(y, x)| y <= 256 - 64 && x <= 256 - 64));
    let patches = sample_patches(&tile, 64, n, 0.05, 11).unwrap();
    let burned = patches.iter().filter(|p| p.burn_fraction() >= 0.05).count();
    assert!(burned >= n / 2, "{burned} of {n} balanced");
    assert_eq!(
        offsets,
        sample_patch_offsets(&tile, 64, n, 0.05, 11).unwrap()
    );
}

#[test]
fn standardized_stats_are_unit() {
    let tiles: Vec<_> = (0..3)
        .map(|s| generate_scene(&params(4, 64), s).unwrap())
        .collect();
    let stats = channel_stats(&tiles).unwrap();
    let std: Vec<_> = tiles
        .iter()
        .map(|t| standardize(t, &stats).unwrap())
        .collect();
    let again = channel_stats(&std).unwrap();
    for ch in 0..4 {
        assert!(again.mean[ch].abs() < 0.05);
        assert!((again.std[ch] - 1.0).abs() < 0.05);
    }
    // a second pass with recomputed stats is ~identity
    for t in &std {
        let twice = standardize(t, &again).unwrap();
        for (a, b) in twice.pre().data().iter().zip(t.pre().data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn standardization_preserves_scaled_differences() {
    let tile = generate_scene(&params(4, 32), 8).unwrap();
    let stats = channel_stats(std::slice::from_ref(&tile)).unwrap();
    let s = standardize(&tile, &stats).unwrap();
    let plane = 32 * 32;
    for i in 0..4 * plane {
        let ch = i / plane;
        let want = (tile.post().data()[i] as f64 - tile.pre().data()[i] as f64) / stats.std[ch];
        let got = s.post().data()[i] as f64 - s.pre().data()[i] as f64;
        assert!(
            (got - want).abs() < 1e-5 * (1.0 + want.abs()),
            "{got} vs {want}"
        );
    }
}

#[test]
fn constant_channel_stays_finite() {
    let pre = Tensor::full(vec![1, 32, 32], 3.0f32);
    let tile = BitemporalTile::new(pre.clone(), pre, vec![0; 1024]).unwrap();
    let stats = channel_stats(std::slice::from_ref(&tile)).unwrap();
    assert_eq!(stats.std[0], 1e-6);
    let s = standardize(&tile, &stats).unwrap();
    assert!(s.pre().all_finite());
    assert!(s.pre().data().iter().all(|&v| v == 0.0));
}

proptest! {
    #[test]
    fn random_tiles_round_trip(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut state = seed;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            state
        };
        let n = c * h * w;
        let pre: Vec<f32> = (0..n).map(|_| f32::from_bits(next() as u32 & 0x7f7f_ffff)).collect();
        let post: Vec<f32> = (0..n).map(|_| f32::from_bits((next() >> 32) as u32)).collect();
        let mask: Vec<u8> = (0..h * w).map(|_| [0u8, 1, 255][(next() % 3) as usize]).collect();
        let tile = BitemporalTile::new(
            Tensor::new(vec![c, h, w], pre).unwrap(),
            Tensor::new(vec![c, h, w], post).unwrap(),
            mask,
        ).unwrap();
        let bytes = encode_tile(&tile);
        prop_assert_eq!(bytes.len(), 16 + 8 * n + h * w);
        let back = decode_tile(&bytes).unwrap();
        prop_assert_eq!(encode_tile(&back), bytes);
    }
}
