//! Adam, the training loop, SUNC checkpoints and thresholded prediction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Mode, RunningStats};
use crate::binio::{checked_numel, put_f32s, read_file, write_atomic, Reader};
use crate::data::{burn_fraction, sample_patch_offsets, BitemporalTile, Mask};
use crate::error::{Error, FormatError, Result};
use crate::loss::{hybrid_loss, LossConfig, NODATA};
use crate::model::{BranchNorm, ModelConfig, SiameseUNet, LEVELS, SPATIAL_MULTIPLE};
use crate::rng::Xoshiro256;
use crate::tensor::{Scalar, Tensor};

// ---- Adam -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update using each parameter's `grad`.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state holds {} tensors, got {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        let g = p.grad.as_ref().map_or(0, Vec::len);
        if g != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::Contract(format!(
                "parameter {i}: {n} elements, gradient {g}, moments {}/{}",
                state.m[i].len(),
                state.v[i].len()
            )));
        }
    }
    state.step += 1;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = c(1.0 - cfg.beta1.powi(t));
    let bc2 = c(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (c(cfg.lr), c(cfg.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.grad.take().expect("checked above");
        for (((x, &g), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *x = *x - lr * mhat / (vhat.sqrt() + eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

// ---- configuration and logs --------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    /// Record every `log_every`-th step (the first and last are always recorded).
    pub log_every: usize,
    /// Minimum burned fraction of the balanced half of sampled patches.
    pub balance_min_burn: f64,
    pub branch_norm: BranchNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            steps: 300,
            batch_size: 4,
            patch_size: 64,
            seed: 0,
            loss: LossConfig::default(),
            log_every: 10,
            balance_min_burn: 0.05,
            branch_norm: BranchNorm::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                a.beta1, a.beta2
            )));
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return Err(Error::Config(format!(
                "adam eps must be positive, got {}",
                a.eps
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config(
                "batch_size and log_every must be at least 1".into(),
            ));
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(SPATIAL_MULTIPLE) {
            return Err(Error::Config(format!(
                "patch_size {} is not a positive multiple of {SPATIAL_MULTIPLE}",
                self.patch_size
            )));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f32,
    pub bce: f32,
    pub dice: f32,
    pub burn_frac: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

// ---- data sources ----------------------------------------------------------

/// Supplies training batches. Implementations must be deterministic given the
/// generator they are handed.
pub trait TileSource {
    fn next_batch(
        &mut self,
        rng: &mut Xoshiro256,
        batch_size: usize,
        patch_size: usize,
    ) -> Result<Vec<BitemporalTile>>;
}

/// A fixed set of tiles visited in shuffled epochs. Tiles larger than the
/// patch size are cropped; every other crop is drawn from windows with at
/// least `balance_min_burn` burned pixels when the tile has any.
#[derive(Clone, Debug)]
pub struct TileSet {
    tiles: Vec<BitemporalTile>,
    balance_min_burn: f64,
    order: Vec<usize>,
    cursor: usize,
    drawn: usize,
}

impl TileSet {
    pub fn new(tiles: Vec<BitemporalTile>, balance_min_burn: f64) -> Result<Self> {
        if tiles.is_empty() {
            return Err(Error::Contract("training needs at least one tile".into()));
        }
        Ok(TileSet {
            tiles,
            balance_min_burn,
            order: Vec::new(),
            cursor: 0,
            drawn: 0,
        })
    }

    pub fn tiles(&self) -> &[BitemporalTile] {
        &self.tiles
    }
}

impl TileSource for TileSet {
    fn next_batch(
        &mut self,
        rng: &mut Xoshiro256,
        batch_size: usize,
        patch_size: usize,
    ) -> Result<Vec<BitemporalTile>> {
        let mut out = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..self.tiles.len()).collect();
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let tile = &self.tiles[self.order[self.cursor]];
            self.cursor += 1;
            let balanced = self.drawn.is_multiple_of(2);
            self.drawn += 1;
            if tile.height() == patch_size && tile.width() == patch_size {
                out.push(tile.clone());
                continue;
            }
            let min_burn = if balanced { self.balance_min_burn } else { 0.0 };
            let (y, x) = sample_patch_offsets(tile, patch_size, 1, min_burn, rng.random())?[0];
            out.push(tile.crop(y, x, patch_size)?);
        }
        Ok(out)
    }
}

/// Stacks tiles into N×C×H×W pre and post tensors plus a concatenated mask.
pub fn batch_tensors(tiles: &[BitemporalTile]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<u8>)> {
    let pre: Vec<_> = tiles.iter().map(BitemporalTile::pre).collect();
    let post: Vec<_> = tiles.iter().map(BitemporalTile::post).collect();
    let mask = tiles
        .iter()
        .flat_map(|t| t.mask().iter().copied())
        .collect();
    Ok((Tensor::stack(&pre)?, Tensor::stack(&post)?, mask))
}

// ---- training ----------------------------------------------------------------

/// A model snapshot plus the training position it was taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SiameseUNet,
    pub step: u64,
    pub rng_state: [u64; 4],
}

/// Scalar losses of one optimization step.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub total: f32,
    pub bce: f32,
    pub dice: f32,
}

/// Forward (train mode), hybrid loss, backward, Adam and running-stat update
/// on one batch.
pub fn train_step(
    model: &mut SiameseUNet,
    adam: &mut AdamState<f32>,
    batch: &[BitemporalTile],
    cfg: &TrainConfig,
) -> Result<StepLosses> {
    let (pre, post, mask) = batch_tensors(batch)?;
    let mut g = Graph::new();
    let params = model.bind(&mut g, true);
    let (a, b) = (g.constant(&pre), g.constant(&post));
    let pass = model.forward_with(&mut g, &params, a, b, Mode::Train, cfg.branch_norm)?;
    let loss = hybrid_loss(&mut g, pass.probs, &mask, &cfg.loss)?;
    let losses = StepLosses {
        total: g.value(loss.total)[0],
        bce: g.value(loss.bce)[0],
        dice: g.value(loss.dice)[0],
    };
    if !losses.total.is_finite() {
        return Ok(losses);
    }
    g.backward(loss.total)?;
    model.store_grads(&g, &params);
    adam_step(model.parameters_mut(), adam, &cfg.adam)?;
    model.apply_bn_updates(&pass.bn_updates);
    Ok(losses)
}

/// Runs `cfg.steps` optimization steps. Deterministic in the model's initial
/// parameters and `cfg.seed`.
///
/// Aborts with [`Error::NonFiniteLoss`] on the first NaN or infinite loss;
/// the model is left as it was before that step.
pub fn train(
    mut model: SiameseUNet,
    source: &mut dyn TileSource,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    let mut rng = Xoshiro256::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.parameters());
    let mut log = TrainLog::default();
    let mut last_finite = None;
    for step in 1..=cfg.steps {
        let batch = source.next_batch(&mut rng, cfg.batch_size, cfg.patch_size)?;
        let burn: f64 =
            batch.iter().map(|t| burn_fraction(t.mask())).sum::<f64>() / batch.len() as f64;
        let l = train_step(&mut model, &mut adam, &batch, cfg)?;
        if !l.total.is_finite() {
            return Err(Error::NonFiniteLoss { step, last_finite });
        }
        last_finite = Some(l.total);
        if step == 1 || step % cfg.log_every == 0 || step == cfg.steps {
            log.records.push(LogRecord {
                step,
                loss: l.total,
                bce: l.bce,
                dice: l.dice,
                burn_frac: burn,
            });
        }
    }
    for p in model.parameters_mut() {
        p.zero_grad();
    }
    Ok((
        Checkpoint {
            model,
            step: cfg.steps as u64,
            rng_state: rng.state(),
        },
        log,
    ))
}

// ---- prediction ----------------------------------------------------------------

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Eval-mode probability map of one tile, H×W row-major.
pub fn predict_probabilities(model: &SiameseUNet, tile: &BitemporalTile) -> Result<Vec<f32>> {
    if tile.channels() != model.config().in_channels {
        return Err(Error::Config(format!(
            "tile has {} channels, model expects {}",
            tile.channels(),
            model.config().in_channels
        )));
    }
    let (pre, post, _) = batch_tensors(std::slice::from_ref(tile))?;
    Ok(model.predict_proba(&pre, &post)?.into_data())
}

/// Binarizes `probs ≥ threshold`; pixels that are nodata in the tile mask stay nodata.
pub fn threshold_mask(probs: &[f32], tile_mask: &[u8], threshold: f64) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    if probs.len() != tile_mask.len() {
        return Err(Error::mismatch(
            "threshold_mask",
            &[probs.len()],
            &[tile_mask.len()],
        ));
    }
    Ok(probs
        .iter()
        .zip(tile_mask)
        .map(|(&p, &m)| {
            if m == NODATA {
                NODATA
            } else {
                u8::from(p as f64 >= threshold)
            }
        })
        .collect())
}

pub fn predict(model: &SiameseUNet, tile: &BitemporalTile, threshold: f64) -> Result<Mask> {
    let probs = predict_probabilities(model, tile)?;
    Ok(Mask {
        height: tile.height(),
        width: tile.width(),
        values: threshold_mask(&probs, tile.mask(), threshold)?,
    })
}

// ---- checkpoints ---------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SUNC";
pub const CHECKPOINT_VERSION: u16 = 1;

fn bn_record_names(model: &SiameseUNet) -> Vec<String> {
    model
        .bn_names()
        .iter()
        .flat_map(|n| [format!("{n}.running_mean"), format!("{n}.running_var")])
        .collect()
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(out, data);
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let cfg = m.config();
    let header = format!(
        "in_channels={}\nbase_width={}\nlevels={LEVELS}\nstep={}\nparam_tensors={}\nbn_layers={}\n",
        cfg.in_channels,
        cfg.base_width,
        ckpt.step,
        m.parameters().len(),
        m.bn_stats().len()
    );
    let mut out = Vec::with_capacity(64 + header.len() + 4 * cfg.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (name, t) in m.parameter_list() {
        put_record(&mut out, name, t.shape(), t.data());
    }
    let names = bn_record_names(m);
    let stats = m.bn_stats().iter().flat_map(|s| [&s.mean, &s.var]);
    for (name, data) in names.iter().zip(stats) {
        put_record(&mut out, name, &[data.len()], data);
    }
    for w in ckpt.rng_state {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

struct Header {
    config: ModelConfig,
    step: u64,
    param_tensors: u64,
    bn_layers: u64,
}

fn parse_header(text: &str, offset: usize) -> Result<Header, FormatError> {
    let bad = |reason: String| FormatError::Header { offset, reason };
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line {line:?} is not key=value")))?;
        let v: u64 = v
            .parse()
            .map_err(|_| bad(format!("value of {k} is not an integer: {v:?}")))?;
        if fields.insert(k.to_string(), v).is_some() {
            return Err(bad(format!("duplicate key {k}")));
        }
    }
    let mut get = |k: &str| {
        fields
            .remove(k)
            .ok_or_else(|| bad(format!("missing key {k}")))
    };
    let in_channels = get("in_channels")? as usize;
    let base_width = get("base_width")? as usize;
    let levels = get("levels")?;
    let step = get("step")?;
    let param_tensors = get("param_tensors")?;
    let bn_layers = get("bn_layers")?;
    if let Some(k) = fields.keys().next() {
        return Err(bad(format!("unknown key {k}")));
    }
    if levels != LEVELS as u64 {
        return Err(bad(format!(
            "levels={levels}, this build supports {LEVELS}"
        )));
    }
    let config = ModelConfig {
        in_channels,
        base_width,
    };
    config.validate().map_err(|e| bad(e.to_string()))?;
    Ok(Header {
        config,
        step,
        param_tensors,
        bn_layers,
    })
}

fn read_record(
    r: &mut Reader<'_>,
    expected_name: &str,
    expected_dims: &[usize],
) -> Result<Vec<f32>, FormatError> {
    let at = r.offset();
    let len = r.u32()? as usize;
    let name_bytes = r.take(len)?;
    let name = String::from_utf8_lossy(name_bytes).into_owned();
    if name != expected_name {
        return Err(FormatError::NameMismatch {
            offset: at,
            expected: expected_name.to_string(),
            found: name,
        });
    }
    let dims_at = r.offset();
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(FormatError::DimOverflow {
            offset: dims_at,
            reason: format!("rank {rank} of {name}"),
        });
    }
    let dims: Vec<u32> = (0..rank).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let found: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    if found != expected_dims {
        return Err(FormatError::ParamShape {
            offset: dims_at,
            name,
            expected: expected_dims.to_vec(),
            found,
        });
    }
    let n = checked_numel(dims_at, &dims)?;
    r.f32s(n)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version_at = r.offset();
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::VersionMismatch {
            offset: version_at,
            expected: CHECKPOINT_VERSION,
            found: version,
        }
        .into());
    }
    let header_at = r.offset();
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| FormatError::Header {
        offset: header_at,
        reason: format!("header is not UTF-8: {e}"),
    })?;
    let header = parse_header(text, header_at)?;

    let template = SiameseUNet::init(header.config, 0)?;
    let counts = (
        template.parameters().len() as u64,
        template.bn_stats().len() as u64,
    );
    if (header.param_tensors, header.bn_layers) != counts {
        return Err(FormatError::Header {
            offset: header_at,
            reason: format!(
                "header lists {} parameter tensors and {} batch-norm layers, config implies {} and {}",
                header.param_tensors, header.bn_layers, counts.0, counts.1
            ),
        }
        .into());
    }
    let mut params = Vec::with_capacity(template.parameters().len());
    for (name, t) in template.parameter_list() {
        let data = read_record(&mut r, name, t.shape())?;
        params.push(Tensor::new(t.shape().to_vec(), data)?);
    }
    let names = bn_record_names(&template);
    let mut bn = Vec::with_capacity(template.bn_stats().len());
    for (pair, stats) in names.chunks(2).zip(template.bn_stats()) {
        let c = stats.mean.len();
        let mean = read_record(&mut r, &pair[0], &[c])?;
        let var = read_record(&mut r, &pair[1], &[c])?;
        bn.push(RunningStats { mean, var });
    }
    let rng_state = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    r.finish()?;
    Ok(Checkpoint {
        model: SiameseUNet::from_parts(header.config, params, bn)?,
        step: header.step,
        rng_state,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

/// Loads a checkpoint and insists it was saved for `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.model.config();
    if found != *expected {
        return Err(Error::Config(format!(
            "checkpoint was saved for in_channels={} base_width={}, expected in_channels={} base_width={}",
            found.in_channels, found.base_width, expected.in_channels, expected.base_width
        )));
    }
    Ok(ckpt)
}
