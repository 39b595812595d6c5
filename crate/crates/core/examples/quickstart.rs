use diffnet_core::data::{generate_scene, SceneParams};
use diffnet_core::train::{predict, train, TileSet};
use diffnet_core::{ModelConfig, SiameseUNet, TrainConfig};

fn main() -> Result<(), diffnet_core::Error> {
    let params = SceneParams {
        channels: 8,
        height: 64,
        width: 64,
        ..SceneParams::default()
    };
    let tiles: Vec<_> = (0..8)
        .map(|s| generate_scene(&params, s))
        .collect::<Result<_, _>>()?;
    let model = SiameseUNet::init(
        ModelConfig {
            in_channels: 8,
            base_width: 8,
        },
        0,
    )?;
    let mut source = TileSet::new(tiles.clone(), 0.05)?;
    let (ckpt, log) = train(model, &mut source, &TrainConfig::default())?;
    let mask = predict(&ckpt.model, &tiles[0], 0.5)?;
    println!(
        "{} steps logged, {} burned pixels",
        log.records.len(),
        mask.values.iter().filter(|&&v| v == 1).count()
    );
    Ok(())
}
