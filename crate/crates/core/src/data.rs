//! Bitemporal tiles: the BTT1/BTM1 containers, a synthetic scene generator,
//! patch sampling and per-channel standardization.
//!
//! Synthetic channels are generic embedding dimensions. They carry no month
//! or sensor semantics; only their pre → post change structure matters.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{checked_numel, put_f32s, read_file, write_atomic, Reader};
use crate::error::{Error, FormatError, Result};
use crate::loss::NODATA;
use crate::rng::Xoshiro256;
use crate::tensor::Tensor;

pub const TILE_MAGIC: &[u8; 4] = b"BTT1";
pub const MASK_MAGIC: &[u8; 4] = b"BTM1";
pub const TILE_HEADER_BYTES: usize = 16;
pub const MASK_HEADER_BYTES: usize = 12;
/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// A co-registered pre/post pair with its burn mask (`0`, `1` or [`NODATA`]).
#[derive(Clone, Debug, PartialEq)]
pub struct BitemporalTile {
    pre: Tensor<f32>,
    post: Tensor<f32>,
    mask: Vec<u8>,
}

impl BitemporalTile {
    /// `pre` and `post` are C×H×W; `mask` is H×W, row-major.
    pub fn new(pre: Tensor<f32>, post: Tensor<f32>, mask: Vec<u8>) -> Result<Self> {
        let (c, h, w) = match *pre.shape() {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(Error::shape(
                    "tile",
                    format!("expected C×H×W, got {:?}", pre.shape()),
                ))
            }
        };
        if pre.shape() != post.shape() {
            return Err(Error::mismatch("tile", pre.shape(), post.shape()));
        }
        if mask.len() != h * w {
            return Err(Error::mismatch("tile", &[c, h, w], &[mask.len()]));
        }
        if let Some(&v) = mask.iter().find(|&&v| v > 1 && v != NODATA) {
            return Err(Error::Config(format!(
                "mask value {v} is not 0, 1 or {NODATA}"
            )));
        }
        Ok(BitemporalTile { pre, post, mask })
    }

    pub fn channels(&self) -> usize {
        self.pre.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pre.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pre.shape()[2]
    }

    pub fn pre(&self) -> &Tensor<f32> {
        &self.pre
    }

    pub fn post(&self) -> &Tensor<f32> {
        &self.post
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    /// Fraction of non-nodata pixels labeled burned.
    pub fn burn_fraction(&self) -> f64 {
        burn_fraction(&self.mask)
    }

    /// Copies the `size`×`size` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, size: usize) -> Result<Self> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        if size == 0 || y + size > h || x + size > w {
            return Err(Error::Contract(format!(
                "window {size}×{size} at ({y}, {x}) exceeds {h}×{w} tile"
            )));
        }
        let cut = |t: &Tensor<f32>| {
            let mut data = Vec::with_capacity(c * size * size);
            for ch in 0..c {
                for row in y..y + size {
                    let start = (ch * h + row) * w + x;
                    data.extend_from_slice(&t.data()[start..start + size]);
                }
            }
            Tensor::new(vec![c, size, size], data).expect("window shape")
        };
        let mut mask = Vec::with_capacity(size * size);
        for row in y..y + size {
            mask.extend_from_slice(&self.mask[row * w + x..row * w + x + size]);
        }
        Ok(BitemporalTile {
            pre: cut(&self.pre),
            post: cut(&self.post),
            mask,
        })
    }
}

pub fn burn_fraction(mask: &[u8]) -> f64 {
    let valid = mask.iter().filter(|&&v| v != NODATA).count();
    if valid == 0 {
        return 0.0;
    }
    mask.iter().filter(|&&v| v == 1).count() as f64 / valid as f64
}

// ---- BTT1 / BTM1 ------------------------------------------------------------

pub fn encode_tile(tile: &BitemporalTile) -> Vec<u8> {
    let mut out = Vec::with_capacity(TILE_HEADER_BYTES + 8 * tile.pre.numel() + tile.mask.len());
    out.extend_from_slice(TILE_MAGIC);
    for d in [tile.channels(), tile.height(), tile.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(&mut out, tile.pre.data());
    put_f32s(&mut out, tile.post.data());
    out.extend_from_slice(&tile.mask);
    out
}

fn read_mask_bytes(r: &mut Reader<'_>, n: usize) -> Result<Vec<u8>, FormatError> {
    let start = r.offset();
    let bytes = r.take(n)?;
    if let Some(i) = bytes.iter().position(|&v| v > 1 && v != NODATA) {
        return Err(FormatError::InvalidMaskValue {
            offset: start + i,
            value: bytes[i],
        });
    }
    Ok(bytes.to_vec())
}

pub fn decode_tile(bytes: &[u8]) -> Result<BitemporalTile, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(TILE_MAGIC)?;
    let dims_at = r.offset();
    let dims = [r.u32()?, r.u32()?, r.u32()?];
    let numel = checked_numel(dims_at, &dims)?;
    let plane = checked_numel(dims_at, &dims[1..])?;
    // Reject headers that promise more payload than the file holds before allocating.
    let payload = numel
        .checked_mul(8)
        .and_then(|b| b.checked_add(plane))
        .ok_or_else(|| FormatError::DimOverflow {
            offset: dims_at,
            reason: format!("dimensions {dims:?} overflow"),
        })?;
    if payload > r.remaining() {
        return Err(FormatError::Truncated {
            offset: r.offset(),
            needed: payload - r.remaining(),
        });
    }
    let shape = vec![dims[0] as usize, dims[1] as usize, dims[2] as usize];
    let pre = Tensor::new(shape.clone(), r.f32s(numel)?).expect("checked shape");
    let post = Tensor::new(shape, r.f32s(numel)?).expect("checked shape");
    let mask = read_mask_bytes(&mut r, plane)?;
    r.finish()?;
    Ok(BitemporalTile { pre, post, mask })
}

pub fn write_tile(tile: &BitemporalTile, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tile(tile))
}

pub fn read_tile(path: impl AsRef<Path>) -> Result<BitemporalTile> {
    Ok(decode_tile(&read_file(path.as_ref())?)?)
}

/// An H×W mask of `0`, `1` or [`NODATA`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
}

pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    let mut out = Vec::with_capacity(MASK_HEADER_BYTES + mask.values.len());
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(mask.height as u32).to_le_bytes());
    out.extend_from_slice(&(mask.width as u32).to_le_bytes());
    out.extend_from_slice(&mask.values);
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MASK_MAGIC)?;
    let dims_at = r.offset();
    let dims = [r.u32()?, r.u32()?];
    let n = checked_numel(dims_at, &dims)?;
    let values = read_mask_bytes(&mut r, n)?;
    r.finish()?;
    Ok(Mask {
        height: dims[0] as usize,
        width: dims[1] as usize,
        values,
    })
}

pub fn write_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    if mask.values.len() != mask.height * mask.width {
        return Err(Error::mismatch(
            "write_mask",
            &[mask.height, mask.width],
            &[mask.values.len()],
        ));
    }
    write_atomic(path.as_ref(), &encode_mask(mask))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    Ok(decode_mask(&read_file(path.as_ref())?)?)
}

// ---- synthetic scenes -------------------------------------------------------

/// Knobs of the synthetic scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Target fraction of pixels inside burn scars, in `[0, 1)`.
    pub burn_fraction_target: f64,
    pub n_scar_blobs: usize,
    /// Per-channel shift magnitude inside the scar.
    pub burn_offset_scale: f64,
    /// Scale of the global per-channel pre → post shift.
    pub seasonal_drift_scale: f64,
    /// Unlabeled change blobs touching at most a quarter of the channels.
    pub confuser_blobs: usize,
    pub noise_sigma: f64,
    /// Largest major/minor axis ratio of scar and confuser ellipses (≥ 1).
    pub max_aspect: f64,
    /// Grid spacing in pixels of the coarse value-noise lattice.
    pub noise_cell: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            channels: 64,
            height: 256,
            width: 256,
            burn_fraction_target: 0.15,
            n_scar_blobs: 2,
            burn_offset_scale: 1.0,
            seasonal_drift_scale: 0.5,
            confuser_blobs: 2,
            noise_sigma: 0.1,
            max_aspect: 2.0,
            noise_cell: 16,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("scene dimensions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.burn_fraction_target) {
            return bad(format!(
                "burn_fraction_target must be in [0, 1), got {}",
                self.burn_fraction_target
            ));
        }
        for (name, v) in [
            ("burn_offset_scale", self.burn_offset_scale),
            ("seasonal_drift_scale", self.seasonal_drift_scale),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.max_aspect >= 1.0 && self.max_aspect.is_finite()) {
            return bad(format!(
                "max_aspect must be at least 1, got {}",
                self.max_aspect
            ));
        }
        if self.noise_cell == 0 {
            return bad("noise_cell must be positive".into());
        }
        Ok(())
    }
}

// The burn response shared by every scene; each scene perturbs it.
const SIGNATURE_SEED: u64 = 0x6275_726e_7363_6172;
const SIGNATURE_JITTER: f64 = 0.25;

/// Per-channel burn direction common to all scenes: random sign, magnitude in [0.5, 1.5].
pub fn burn_signature(channels: usize) -> Vec<f64> {
    let mut rng = Xoshiro256::seed_from_u64(SIGNATURE_SEED);
    (0..channels).map(|_| signed_unit(&mut rng)).collect()
}

fn signed_unit(rng: &mut Xoshiro256) -> f64 {
    let m: f64 = rng.random_range(0.5..1.5);
    if rng.random_bool(0.5) {
        m
    } else {
        -m
    }
}

fn normal(rng: &mut Xoshiro256) -> f64 {
    rng.sample(StandardNormal)
}

/// One channel of bilinear value noise (two octaves), standardized to mean 0, std 1.
fn value_noise(rng: &mut Xoshiro256, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for (cell, amp) in [(cell, 1.0), ((cell / 4).max(1), 0.35)] {
        let gh = h / cell + 2;
        let gw = w / cell + 2;
        let grid: Vec<f64> = (0..gh * gw).map(|_| normal(rng)).collect();
        for y in 0..h {
            let fy = y as f64 / cell as f64;
            let (iy, ty) = (fy as usize, fy.fract());
            for x in 0..w {
                let fx = x as f64 / cell as f64;
                let (ix, tx) = (fx as usize, fx.fract());
                let g = |r: usize, c: usize| grid[r * gw + c];
                let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
                let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
                field[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    field.iter_mut().for_each(|v| *v = (*v - mean) / std);
    field
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut Xoshiro256, h: usize, w: usize, area: f64, max_aspect: f64) -> Self {
        let aspect = if max_aspect > 1.0 {
            rng.random_range(1.0..max_aspect)
        } else {
            1.0
        };
        let r = (area / std::f64::consts::PI).sqrt();
        let (a, b) = (r * aspect.sqrt(), r / aspect.sqrt());
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        // Keep the centre far enough inside that most of the blob lands in the tile.
        let pick = |rng: &mut Xoshiro256, extent: usize| {
            let lo = b.min(extent as f64 / 2.0);
            let hi = extent as f64 - lo;
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                extent as f64 / 2.0
            }
        };
        let cy = pick(rng, h);
        let cx = pick(rng, w);
        Ellipse {
            cy,
            cx,
            a,
            b,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn rasterize(&self, h: usize, w: usize, out: &mut [bool]) {
        for y in 0..h {
            for x in 0..w {
                if self.contains(y, x) {
                    out[y * w + x] = true;
                }
            }
        }
    }
}

/// Generates one synthetic scene; a pure function of `(params, seed)`.
///
/// `pre` is per-channel value noise. `post` adds a global per-channel drift,
/// the burn offset inside the scar ellipses (the shared signature plus
/// per-scene jitter), unlabeled offsets on a quarter of the channels inside
/// the confuser ellipses, and Gaussian noise.
pub fn generate_scene(params: &SceneParams, seed: u64) -> Result<BitemporalTile> {
    params.validate()?;
    let (c, h, w) = (params.channels, params.height, params.width);
    let plane = h * w;
    let mut rng = Xoshiro256::seed_from_u64(seed);

    let mut pre = Vec::with_capacity(c * plane);
    for _ in 0..c {
        pre.extend(value_noise(&mut rng, h, w, params.noise_cell));
    }

    let blob_area = if params.n_scar_blobs > 0 {
        params.burn_fraction_target * plane as f64 / params.n_scar_blobs as f64
    } else {
        0.05 * plane as f64
    };
    let mut scar = vec![false; plane];
    if params.burn_fraction_target > 0.0 {
        for _ in 0..params.n_scar_blobs {
            Ellipse::random(&mut rng, h, w, blob_area, params.max_aspect)
                .rasterize(h, w, &mut scar);
        }
    }

    let signature = burn_signature(c);
    let burn: Vec<f64> = signature
        .iter()
        .map(|s| params.burn_offset_scale * (s + SIGNATURE_JITTER * normal(&mut rng)))
        .collect();
    let drift: Vec<f64> = (0..c)
        .map(|_| params.seasonal_drift_scale * normal(&mut rng))
        .collect();

    let mut confuser_offsets = vec![vec![0.0; c]; params.confuser_blobs];
    let mut confuser_masks = vec![vec![false; plane]; params.confuser_blobs];
    let touched = (c / 4).max(1);
    for (offsets, mask) in confuser_offsets.iter_mut().zip(&mut confuser_masks) {
        Ellipse::random(&mut rng, h, w, blob_area, params.max_aspect).rasterize(h, w, mask);
        for ch in index::sample(&mut rng, c, touched) {
            offsets[ch] = params.burn_offset_scale * signed_unit(&mut rng);
        }
    }

    let mut post = Vec::with_capacity(c * plane);
    for ch in 0..c {
        for p in 0..plane {
            let mut v = pre[ch * plane + p] + drift[ch];
            if scar[p] {
                v += burn[ch];
            }
            for (offsets, mask) in confuser_offsets.iter().zip(&confuser_masks) {
                if mask[p] {
                    v += offsets[ch];
                }
            }
            if params.noise_sigma > 0.0 {
                v += params.noise_sigma * normal(&mut rng);
            }
            post.push(v as f32);
        }
    }

    let shape = vec![c, h, w];
    BitemporalTile::new(
        Tensor::new(shape.clone(), pre.into_iter().map(|v| v as f32).collect())?,
        Tensor::new(shape, post)?,
        scar.into_iter().map(u8::from).collect(),
    )
}

// ---- patch sampling ---------------------------------------------------------

/// Summed-area table with one row and column of zero padding.
struct Integral {
    w: usize,
    sums: Vec<u64>,
}

impl Integral {
    fn new(values: impl Iterator<Item = u64>, h: usize, w: usize) -> Self {
        let stride = w + 1;
        let mut sums = vec![0u64; (h + 1) * stride];
        let values: Vec<u64> = values.collect();
        for y in 0..h {
            let mut row = 0;
            for x in 0..w {
                row += values[y * w + x];
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Integral { w, sums }
    }

    fn window(&self, y: usize, x: usize, size: usize) -> u64 {
        let s = self.w + 1;
        let at = |r: usize, c: usize| self.sums[r * s + c];
        at(y + size, x + size) + at(y, x) - at(y, x + size) - at(y + size, x)
    }
}

/// Top-left offsets of `n` windows of side `patch`.
///
/// The first `⌈n/2⌉` are drawn uniformly from the windows whose burned
/// fraction is at least `balance_min_burn` (uniformly from all windows
/// when none qualifies); the rest are uniform.
pub fn sample_patch_offsets(
    tile: &BitemporalTile,
    patch: usize,
    n: usize,
    balance_min_burn: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if patch == 0 || !patch.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "patch size {patch} is not a positive multiple of 32"
        )));
    }
    let (h, w) = (tile.height(), tile.width());
    if patch > h.min(w) {
        return Err(Error::Contract(format!(
            "patch {patch} larger than {h}×{w} tile"
        )));
    }
    let (ny, nx) = (h - patch + 1, w - patch + 1);
    let mut rng = Xoshiro256::seed_from_u64(seed);

    let burned = Integral::new(tile.mask.iter().map(|&v| u64::from(v == 1)), h, w);
    let valid = Integral::new(tile.mask.iter().map(|&v| u64::from(v != NODATA)), h, w);
    let qualifying: Vec<(usize, usize)> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (y, x)))
        .filter(|&(y, x)| {
            let v = valid.window(y, x, patch);
            v > 0 && burned.window(y, x, patch) as f64 >= balance_min_burn * v as f64
        })
        .collect();

    let balanced = n.div_ceil(2);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i < balanced && !qualifying.is_empty() {
            out.push(qualifying[rng.random_range(0..qualifying.len())]);
        } else {
            out.push((rng.random_range(0..ny), rng.random_range(0..nx)));
        }
    }
    Ok(out)
}

pub fn sample_patches(
    tile: &BitemporalTile,
    patch: usize,
    n: usize,
    balance_min_burn: f64,
    seed: u64,
) -> Result<Vec<BitemporalTile>> {
    sample_patch_offsets(tile, patch, n, balance_min_burn, seed)?
        .into_iter()
        .map(|(y, x)| tile.crop(y, x, patch))
        .collect()
}

// ---- standardization --------------------------------------------------------

/// Per-channel mean and (population) standard deviation over both dates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(tiles: &[BitemporalTile]) -> Result<ChannelStats> {
    let first = tiles
        .first()
        .ok_or_else(|| Error::Contract("channel_stats needs at least one tile".into()))?;
    let c = first.channels();
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut count = 0usize;
    for t in tiles {
        if t.channels() != c {
            return Err(Error::Config(format!(
                "tiles disagree on channel count: {c} vs {}",
                t.channels()
            )));
        }
        let plane = t.height() * t.width();
        for data in [t.pre.data(), t.post.data()] {
            for ch in 0..c {
                for &v in &data[ch * plane..(ch + 1) * plane] {
                    sum[ch] += v as f64;
                }
            }
        }
        count += 2 * plane;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    for t in tiles {
        let plane = t.height() * t.width();
        for data in [t.pre.data(), t.post.data()] {
            for ch in 0..c {
                for &v in &data[ch * plane..(ch + 1) * plane] {
                    let d = v as f64 - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
    }
    let std = sq
        .iter()
        .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Applies `(x − mean) / std` per channel to both dates with the same statistics.
pub fn standardize(tile: &BitemporalTile, stats: &ChannelStats) -> Result<BitemporalTile> {
    let c = tile.channels();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::Config(format!(
            "statistics cover {} channels, tile has {c}",
            stats.mean.len()
        )));
    }
    let plane = tile.height() * tile.width();
    let apply = |t: &Tensor<f32>| {
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / plane;
            let s = stats.std[ch].max(STD_FLOOR);
            *v = ((*v as f64 - stats.mean[ch]) / s) as f32;
        }
        out
    };
    Ok(BitemporalTile {
        pre: apply(&tile.pre),
        post: apply(&tile.post),
        mask: tile.mask.clone(),
    })
}
