use diffnet_core::data::{generate_scene, BitemporalTile, SceneParams};
use diffnet_core::error::FormatError;
use diffnet_core::train::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, predict,
    predict_probabilities, save_checkpoint, train, Checkpoint, TileSet, TrainConfig,
};
use diffnet_core::{Error, ModelConfig, SiameseUNet};

fn model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 4,
        base_width: 4,
    }
}

fn tiles(n: u64, size: usize) -> Vec<BitemporalTile> {
    let p = SceneParams {
        channels: 4,
        height: size,
        width: size,
        ..SceneParams::default()
    };
    (0..n).map(|s| generate_scene(&p, s).unwrap()).collect()
}

fn quick_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        patch_size: 32,
        seed: 5,
        log_every: 1,
        ..TrainConfig::default()
    }
}

fn run(steps: usize) -> (Checkpoint, diffnet_core::TrainLog) {
    let model = SiameseUNet::init(model_config(), 1).unwrap();
    let mut source = TileSet::new(tiles(3, 64), 0.05).unwrap();
    train(model, &mut source, &quick_cfg(steps)).unwrap()
}

#[test]
fn identical_seeds_give_identical_logs() {
    let (a, la) = run(6);
    let (b, lb) = run(6);
    let bits = |l: &diffnet_core::TrainLog| -> Vec<u32> {
        l.records.iter().map(|r| r.loss.to_bits()).collect()
    };
    assert_eq!(bits(&la), bits(&lb));
    assert_eq!(la, lb);
    assert_eq!(encode_checkpoint(&a), encode_checkpoint(&b));
    let steps: Vec<usize> = la.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
}

#[test]
fn different_seed_changes_log() {
    let model = SiameseUNet::init(model_config(), 1).unwrap();
    let mut source = TileSet::new(tiles(3, 64), 0.05).unwrap();
    let cfg = TrainConfig {
        seed: 6,
        ..quick_cfg(4)
    };
    let (_, other) = train(model, &mut source, &cfg).unwrap();
    assert_ne!(other, run(4).1);
}

#[test]
fn sparse_logging_keeps_first_and_last() {
    let model = SiameseUNet::init(model_config(), 1).unwrap();
    let mut source = TileSet::new(tiles(2, 64), 0.05).unwrap();
    let cfg = TrainConfig {
        log_every: 4,
        ..quick_cfg(10)
    };
    let (_, log) = train(model, &mut source, &cfg).unwrap();
    let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 4, 8, 10]);
}

#[test]
fn zero_steps_returns_initial_model() {
    let init = SiameseUNet::init(model_config(), 1).unwrap();
    let (ckpt, log) = run(0);
    assert!(log.records.is_empty());
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.model.parameters(), init.parameters());
    assert_eq!(ckpt.model.bn_stats(), init.bn_stats());
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let (ckpt, _) = run(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.sunc");
    save_checkpoint(&ckpt, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.step, 3);
    assert_eq!(back.rng_state, ckpt.rng_state);
    let tile = &tiles(1, 64)[0];
    let a = predict_probabilities(&ckpt.model, tile).unwrap();
    let b = predict_probabilities(&back.model, tile).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(back.model.parameter_names(), ckpt.model.parameter_names());
    let names: Vec<&str> = back
        .model
        .parameter_list()
        .iter()
        .map(|(n, _)| *n)
        .collect();
    assert_eq!(names, ckpt.model.parameter_names());
}

#[test]
fn checkpoint_errors_are_distinct() {
    let ckpt = Checkpoint {
        model: SiameseUNet::init(model_config(), 2).unwrap(),
        step: 0,
        rng_state: [1, 2, 3, 4],
    };
    let bytes = encode_checkpoint(&ckpt);
    assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);

    let mut v = bytes.clone();
    v[4] = 9;
    assert!(matches!(
        decode_checkpoint(&v),
        Err(Error::Format(FormatError::VersionMismatch { found: 9, .. }))
    ));

    let mut m = bytes.clone();
    m[0] = b'X';
    assert!(matches!(
        decode_checkpoint(&m),
        Err(Error::Format(FormatError::BadMagic { .. }))
    ));

    // corrupted header length field
    let mut l = bytes.clone();
    l[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(
        decode_checkpoint(&l),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));

    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 3]),
        Err(Error::Format(FormatError::Truncated { .. }))
    ));

    // rename the first record: enc1.conv.weight → enc1.conv.weighx
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let name_at = 10 + header_len + 4;
    let mut n = bytes.clone();
    n[name_at + 15] = b'x';
    assert!(matches!(
        decode_checkpoint(&n),
        Err(Error::Format(FormatError::NameMismatch { .. }))
    ));

    // first record's leading dimension 4 → 5
    let mut s = bytes.clone();
    let dims_at = name_at + "enc1.conv.weight".len() + 4;
    s[dims_at] = 5;
    assert!(matches!(
        decode_checkpoint(&s),
        Err(Error::Format(FormatError::ParamShape { .. }))
    ));

    let mut t = bytes;
    t.push(0);
    assert!(matches!(
        decode_checkpoint(&t),
        Err(Error::Format(FormatError::TrailingBytes { .. }))
    ));
}

#[test]
fn mismatched_config_is_rejected() {
    let ckpt = Checkpoint {
        model: SiameseUNet::init(model_config(), 2).unwrap(),
        step: 0,
        rng_state: [1, 2, 3, 4],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sunc");
    save_checkpoint(&ckpt, &path).unwrap();
    let other = ModelConfig {
        in_channels: 4,
        base_width: 8,
    };
    assert!(matches!(
        load_checkpoint_for(&path, &other),
        Err(Error::Config(_))
    ));
    assert!(load_checkpoint_for(&path, &model_config()).is_ok());
}

#[test]
fn threshold_rules_on_a_tile() {
    let model = SiameseUNet::init(model_config(), 3).unwrap();
    let tile = &tiles(1, 64)[0];
    let probs = predict_probabilities(&model, tile).unwrap();
    let max = probs.iter().cloned().fold(0.0f32, f32::max) as f64;
    let above = predict(&model, tile, (max + 1e-6).min(1.0)).unwrap();
    assert!(above.values.iter().all(|&v| v == 0));
    assert!(predict(&model, tile, 0.0)
        .unwrap()
        .values
        .iter()
        .all(|&v| v == 1));

    let mut last = usize::MAX;
    for t in [0.0, 0.3, 0.49, 0.5, 0.5001, 0.51, 0.7, 1.0] {
        let n = predict(&model, tile, t)
            .unwrap()
            .values
            .iter()
            .filter(|&&v| v == 1)
            .count();
        assert!(n <= last, "threshold {t} increased positives");
        last = n;
    }
}

#[test]
fn nodata_propagates_to_prediction() {
    let model = SiameseUNet::init(model_config(), 3).unwrap();
    let t = &tiles(1, 32)[0];
    let mut mask = t.mask().to_vec();
    mask[..40].iter_mut().for_each(|v| *v = 255);
    let tile = BitemporalTile::new(t.pre().clone(), t.post().clone(), mask).unwrap();
    let pred = predict(&model, &tile, 0.5).unwrap();
    assert!(pred.values[..40].iter().all(|&v| v == 255));
    assert!(pred.values[40..].iter().all(|&v| v <= 1));
}

#[test]
fn predict_rejects_bad_inputs() {
    let model = SiameseUNet::init(model_config(), 3).unwrap();
    let p = SceneParams {
        channels: 4,
        height: 48,
        width: 64,
        ..SceneParams::default()
    };
    let odd = generate_scene(&p, 0).unwrap();
    assert!(matches!(
        predict(&model, &odd, 0.5),
        Err(Error::Shape { .. })
    ));
    let p = SceneParams {
        channels: 3,
        height: 32,
        width: 32,
        ..SceneParams::default()
    };
    let wrong_c = generate_scene(&p, 0).unwrap();
    let err = predict(&model, &wrong_c, 0.5).unwrap_err();
    assert!(
        err.to_string().contains('3') && err.to_string().contains('4'),
        "{err}"
    );
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let mut model = SiameseUNet::init(model_config(), 1).unwrap();
    let last = model.parameters().len() - 1;
    model.parameters_mut()[last].data_mut()[0] = f32::NAN;
    let mut source = TileSet::new(tiles(2, 64), 0.05).unwrap();
    let err = train(model, &mut source, &quick_cfg(3)).unwrap_err();
    assert!(
        matches!(
            err,
            Error::NonFiniteLoss {
                step: 1,
                last_finite: None
            }
        ),
        "{err}"
    );
}

#[test]
fn loss_decreases_on_a_short_run() {
    let model = SiameseUNet::init(model_config(), 1).unwrap();
    let mut source = TileSet::new(tiles(2, 32), 0.05).unwrap();
    let (_, log) = train(model, &mut source, &quick_cfg(40)).unwrap();
    let first = log.records.first().unwrap().loss;
    let last = log.records.last().unwrap().loss;
    assert!(last < first, "{first} → {last}");
}
