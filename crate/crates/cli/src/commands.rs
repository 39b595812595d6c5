//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use diffnet_core::data::{
    decode_mask, decode_tile, generate_scene, read_tile, write_mask, write_tile, Mask, MASK_MAGIC,
    TILE_MAGIC,
};
use diffnet_core::train::{load_checkpoint, predict, save_checkpoint, train, AdamConfig, TileSet};
use diffnet_core::{LossConfig, ModelConfig, PosWeight, SiameseUNet, TrainConfig, TrainLog};
use serde_json::json;

use crate::args::{
    Cli, Command, EvalArgs, GenArgs, PredictArgs, RenderArgs, ReplayArgs, TrainArgs,
};
use crate::error::{CliError, Result};
use crate::eval::{evaluate_counts, site_counts, write_eval_csv};
use crate::manifest::{manifest_path_for, RunManifest, VERSION};
use crate::render::render_confusion;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TILE_EXTENSION: &str = "btt";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
        Command::Replay(a) => cmd_replay(a),
    }
}

pub fn tile_file_name(index: usize) -> String {
    format!("tile_{index:05}.{TILE_EXTENSION}")
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let params = args.scene_params();
    params.validate()?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| CliError::io(&args.out_dir, e))?;
    let mut manifest = RunManifest::new("gen", args)?;
    manifest.seeds.insert("seed".into(), args.seed);
    for i in 0..args.count {
        let tile = generate_scene(&params, args.seed.wrapping_add(i as u64))?;
        let path = args.out_dir.join(tile_file_name(i));
        write_tile(&tile, &path)?;
        manifest.outputs.push(path);
    }
    manifest.write(&args.out_dir.join(MANIFEST_FILE))?;
    println!("wrote {} tiles to {}", args.count, args.out_dir.display());
    Ok(())
}

/// `.btt` files directly inside `dir`, sorted by name.
pub fn find_tiles(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == TILE_EXTENSION) {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

fn parse_pos_weight(s: &str) -> Result<PosWeight> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(PosWeight::Auto);
    }
    s.parse().map(PosWeight::Fixed).map_err(|_| {
        CliError::Usage(format!(
            "--pos-weight must be `auto` or a number, got {s:?}"
        ))
    })
}

pub fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        steps: args.steps,
        batch_size: args.batch_size,
        patch_size: args.patch_size,
        seed: args.seed,
        loss: LossConfig {
            alpha: args.alpha,
            pos_weight: parse_pos_weight(&args.pos_weight)?,
            dice_eps: args.dice_eps,
        },
        log_every: args.log_every,
        balance_min_burn: args.balance_min_burn,
        branch_norm: args.branch_norm.into(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn default_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint
        .file_name()
        .map(std::ffi::OsString::from)
        .unwrap_or_default();
    name.push(".log.csv");
    checkpoint.with_file_name(name)
}

/// CSV with header `step,loss,bce,dice,burn_frac`.
pub fn write_log_csv<W: Write>(log: &TrainLog, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "bce", "dice", "burn_frac"])?;
    for r in &log.records {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.bce.to_string(),
            r.dice.to_string(),
            r.burn_frac.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::Data(format!("csv: {e}")))?;
    Ok(())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut args = args.clone();
    let log_path = args
        .log
        .get_or_insert_with(|| default_log_path(&args.out))
        .clone();
    let cfg = train_config(&args)?;

    let paths = find_tiles(&args.data_dir)?;
    if paths.is_empty() {
        return Err(CliError::Usage(format!(
            "no .{TILE_EXTENSION} tiles found in {}",
            args.data_dir.display()
        )));
    }
    let tiles = paths.iter().map(read_tile).collect::<Result<Vec<_>, _>>()?;
    let channels = tiles[0].channels();
    if let Some((p, t)) = paths
        .iter()
        .zip(&tiles)
        .find(|(_, t)| t.channels() != channels)
    {
        return Err(CliError::Data(format!(
            "{} has {} channels but {} has {channels}",
            p.display(),
            t.channels(),
            paths[0].display()
        )));
    }

    let model_config = ModelConfig {
        in_channels: channels,
        base_width: args.base_width,
    };
    let model = SiameseUNet::init(model_config, args.seed)?;
    let mut manifest = RunManifest::new("train", &args)?;
    manifest.seeds.insert("seed".into(), args.seed);
    manifest
        .resolved
        .insert("in-channels".into(), json!(channels));
    manifest
        .resolved
        .insert("param-count".into(), json!(model.param_count()));
    manifest.inputs = paths;

    let mut source = TileSet::new(tiles, cfg.balance_min_burn)?;
    let (ckpt, log) = train(model, &mut source, &cfg)?;
    save_checkpoint(&ckpt, &args.out)?;
    let mut csv_bytes = Vec::new();
    write_log_csv(&log, &mut csv_bytes)?;
    std::fs::write(&log_path, csv_bytes).map_err(|e| CliError::io(&log_path, e))?;

    manifest.outputs = vec![args.out.clone(), log_path];
    manifest.write(&manifest_path_for(&args.out))?;
    if let Some(last) = log.records.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    println!("wrote checkpoint {}", args.out.display());
    Ok(())
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let tile = read_tile(&args.tile)?;
    let mask = predict(&ckpt.model, &tile, args.threshold)?;
    write_mask(&mask, &args.out)?;
    let mut manifest = RunManifest::new("predict", args)?;
    manifest.inputs = vec![args.checkpoint.clone(), args.tile.clone()];
    manifest.outputs = vec![args.out.clone()];
    manifest.write(&manifest_path_for(&args.out))?;
    let positive = mask.values.iter().filter(|&&v| v == 1).count();
    println!(
        "{positive} of {} pixels predicted burned",
        mask.values.len()
    );
    Ok(())
}

/// Reads a mask file, or the label mask of a tile file, by magic number.
pub fn read_truth(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if bytes.starts_with(TILE_MAGIC) {
        decode_tile(&bytes).map(|t| Mask {
            height: t.height(),
            width: t.width(),
            values: t.mask().to_vec(),
        })
    } else if bytes.starts_with(MASK_MAGIC) {
        decode_mask(&bytes)
    } else {
        return Err(CliError::Data(format!(
            "{}: neither a tile nor a mask file",
            path.display()
        )));
    };
    parsed.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_pred(path: &Path) -> Result<Mask> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_mask(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if args.pred.len() != args.truth.len() {
        return Err(CliError::Usage(format!(
            "{} predictions but {} truth files",
            args.pred.len(),
            args.truth.len()
        )));
    }
    if !args.site.is_empty() && args.site.len() != args.pred.len() {
        return Err(CliError::Usage(format!(
            "{} site names for {} predictions",
            args.site.len(),
            args.pred.len()
        )));
    }
    let mut sites = Vec::with_capacity(args.pred.len());
    for (i, (p, t)) in args.pred.iter().zip(&args.truth).enumerate() {
        let name = match args.site.get(i) {
            Some(s) => s.clone(),
            None => p
                .file_stem()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        };
        let counts = site_counts(&name, &read_pred(p)?, &read_truth(t)?)?;
        sites.push((name, counts));
    }
    let table = evaluate_counts(&sites)?;
    let mut bytes = Vec::new();
    write_eval_csv(&table, &mut bytes)?;
    std::fs::write(&args.out, bytes).map_err(|e| CliError::io(&args.out, e))?;

    let mut manifest = RunManifest::new("eval", args)?;
    manifest.inputs = args.pred.iter().chain(&args.truth).cloned().collect();
    manifest.outputs = vec![args.out.clone()];
    manifest.write(&manifest_path_for(&args.out))?;
    println!(
        "{} sites: mean f1 {:.6}, mean iou {:.6}",
        table.rows.len(),
        table.mean.f1,
        table.mean.iou
    );
    Ok(())
}

pub fn cmd_render(args: &RenderArgs) -> Result<()> {
    let image = render_confusion(&read_pred(&args.pred)?, &read_truth(&args.truth)?)?;
    std::fs::write(&args.out, image).map_err(|e| CliError::io(&args.out, e))?;
    let mut manifest = RunManifest::new("render", args)?;
    manifest.inputs = vec![args.pred.clone(), args.truth.clone()];
    manifest.outputs = vec![args.out.clone()];
    manifest.write(&manifest_path_for(&args.out))?;
    Ok(())
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::read(&args.manifest)?;
    if manifest.version != VERSION {
        return Err(CliError::Usage(format!(
            "manifest was written by version {}, this is {VERSION}",
            manifest.version
        )));
    }
    if manifest.subcommand == "replay" {
        return Err(CliError::Usage("a manifest cannot replay a replay".into()));
    }
    let cli = Cli::try_parse_from(manifest.to_argv()?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", args.manifest.display())))?;
    run(&cli)
}
