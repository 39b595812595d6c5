//! Siamese U-Net with per-level feature differencing.
//!
//! Both acquisition dates run through one encoder (a single parameter set).
//! Each of the five encoder blocks is `MaxPool(ReLU(BN(Conv3x3(x))))`, so the
//! pyramid levels sit at 1/2, 1/4, 1/8, 1/16 and 1/32 of the input. The
//! decoder consumes only differences `ΔF_l = F_post^l − F_pre^l`: the deepest
//! difference seeds it, and at levels 4 → 1 every block computes
//! `ReLU(BN(Conv3x3(Concat[UpConv2x2(x), ΔF_l])))`. A final 2×2 transposed
//! convolution returns to full resolution ahead of a 1×1 head and a sigmoid.
//!
//! Parameters are stored flat, in [`SiameseUNet::parameter_list`] order:
//!
//! ```text
//! enc{1..5}.conv.weight  enc{l}.bn.gamma  enc{l}.bn.beta
//! dec{4..1}.up.weight    dec{l}.up.bias  dec{l}.conv.weight  dec{l}.bn.gamma  dec{l}.bn.beta
//! final_up.weight  final_up.bias  head.weight  head.bias
//! ```
//!
//! Convolutions that feed a batch norm carry no bias: the BN shift subsumes it.

use rand::Rng;

use crate::autodiff::{BatchStats, Graph, Mode, RunningStats, Var, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{Scalar, Tensor};

pub const LEVELS: usize = 5;
/// Input height and width must be multiples of this (one halving per level).
pub const SPATIAL_MULTIPLE: usize = 1 << LEVELS;

const ENC_STRIDE: usize = 3;
const DEC_STRIDE: usize = 5;
const DEC_BASE: usize = LEVELS * ENC_STRIDE;
const FINAL_BASE: usize = DEC_BASE + (LEVELS - 1) * DEC_STRIDE;
const PARAM_TENSORS: usize = FINAL_BASE + 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Width of level-1 features; doubles per level.
    pub base_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 64,
            base_width: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be at least 1".into()));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!(
                "base_width must be at least 4, got {}",
                self.base_width
            )));
        }
        Ok(())
    }

    /// Channel count of level `l ∈ 1..=5` (encoder output and decoder output).
    pub fn width(&self, level: usize) -> usize {
        self.base_width << (level - 1)
    }

    /// Closed-form number of trainable scalars:
    /// `9·C·b + 3744·b² + 109·b + 1` for input channels C and base width b.
    pub fn param_count(&self) -> usize {
        let (c, b) = (self.in_channels, self.base_width);
        9 * c * b + 3744 * b * b + 109 * b + 1
    }
}

/// Encoder outputs, finest level first (`levels[0]` is F^1 at 1/2 resolution).
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

/// `ΔF^l = F_post^l − F_pre^l`, finest level first.
#[derive(Clone, Copy, Debug)]
pub struct DifferencePyramid {
    pub levels: [Var; LEVELS],
}

/// Batch statistics observed by one batch-norm layer during a train-mode pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T = f32> {
    pub layer: usize,
    pub stats: BatchStats<T>,
}

/// Graph handles of the model parameters, in parameter-list order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Indices of the shared encoder parameters within the list.
    pub fn encoder_range() -> std::ops::Range<usize> {
        0..DEC_BASE
    }
}

/// How train-mode batch norm in the encoder pools statistics over the two dates.
///
/// Evaluation always uses the running statistics, for which both policies
/// compute identical values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BranchNorm {
    /// One statistic per layer over the pre and post batches together, the
    /// same pooling the shared running statistics apply at evaluation.
    #[default]
    Joint,
    /// Each date is its own encoder pass with its own batch statistics.
    Separate,
}

#[derive(Debug)]
pub struct ForwardPass<T = f32> {
    pub probs: Var,
    pub pre: FeaturePyramid,
    pub post: FeaturePyramid,
    pub diffs: DifferencePyramid,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// The network over element type `T`. Training and inference use
/// [`SiameseUNet`] (`f32`); an `f64` copy (see [`SiameseNet::cast`]) serves
/// exact gradient comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct SiameseNet<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    bn: Vec<RunningStats<T>>,
}

pub type SiameseUNet = SiameseNet<f32>;

impl<T: Scalar> SiameseNet<T> {
    /// Fan-in scaled uniform init, `U(−√(6/fan_in), √(6/fan_in))`, drawn in
    /// parameter-list order from `Xoshiro256::seed_from_u64(seed)`. Biases and
    /// BN shifts start at 0, BN scales at 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let mut names = Vec::with_capacity(PARAM_TENSORS);
        let mut params = Vec::with_capacity(PARAM_TENSORS);
        let mut bn_names = Vec::new();
        let mut bn = Vec::new();

        let mut push_weight = |names: &mut Vec<String>,
                               params: &mut Vec<Tensor<T>>,
                               name: String,
                               shape: Vec<usize>,
                               fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                .collect();
            names.push(name);
            params.push(
                Tensor::new(shape, data)
                    .expect("consistent shape")
                    .with_grad(),
            );
        };
        let push_fill = |names: &mut Vec<String>,
                         params: &mut Vec<Tensor<T>>,
                         name: String,
                         len: usize,
                         value: f64| {
            names.push(name);
            params.push(Tensor::full(vec![len], T::from_f64_lossy(value)).with_grad());
        };

        for l in 1..=LEVELS {
            let c_in = if l == 1 {
                config.in_channels
            } else {
                config.width(l - 1)
            };
            let c = config.width(l);
            push_weight(
                &mut names,
                &mut params,
                format!("enc{l}.conv.weight"),
                vec![c, c_in, 3, 3],
                9 * c_in,
            );
            push_fill(&mut names, &mut params, format!("enc{l}.bn.gamma"), c, 1.0);
            push_fill(&mut names, &mut params, format!("enc{l}.bn.beta"), c, 0.0);
            bn_names.push(format!("enc{l}.bn"));
            bn.push(RunningStats::new(c));
        }
        for l in (1..LEVELS).rev() {
            let c_up = config.width(l + 1);
            let c = config.width(l);
            push_weight(
                &mut names,
                &mut params,
                format!("dec{l}.up.weight"),
                vec![c_up, c, 2, 2],
                c_up,
            );
            push_fill(&mut names, &mut params, format!("dec{l}.up.bias"), c, 0.0);
            push_weight(
                &mut names,
                &mut params,
                format!("dec{l}.conv.weight"),
                vec![c, 2 * c, 3, 3],
                18 * c,
            );
            push_fill(&mut names, &mut params, format!("dec{l}.bn.gamma"), c, 1.0);
            push_fill(&mut names, &mut params, format!("dec{l}.bn.beta"), c, 0.0);
            bn_names.push(format!("dec{l}.bn"));
            bn.push(RunningStats::new(c));
        }
        let c1 = config.width(1);
        push_weight(
            &mut names,
            &mut params,
            "final_up.weight".into(),
            vec![c1, c1, 2, 2],
            c1,
        );
        push_fill(&mut names, &mut params, "final_up.bias".into(), c1, 0.0);
        push_weight(
            &mut names,
            &mut params,
            "head.weight".into(),
            vec![1, c1, 1, 1],
            c1,
        );
        push_fill(&mut names, &mut params, "head.bias".into(), 1, 0.0);
        debug_assert_eq!(params.len(), PARAM_TENSORS);

        Ok(SiameseNet {
            config,
            names,
            params,
            bn_names,
            bn,
        })
    }

    /// Rebuilds a model from stored tensors, checking them against the layout
    /// `config` implies. Mismatches are errors, never reshapes.
    pub fn from_parts(
        config: ModelConfig,
        params: Vec<Tensor<T>>,
        bn: Vec<RunningStats<T>>,
    ) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if params.len() != model.params.len() || bn.len() != model.bn.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors and {} batch-norm layers, got {} and {}",
                model.params.len(),
                model.bn.len(),
                params.len(),
                bn.len()
            )));
        }
        for ((name, want), got) in model.names.iter().zip(&model.params).zip(&params) {
            if want.shape() != got.shape() {
                return Err(Error::Config(format!(
                    "{name}: expected shape {:?}, got {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        for ((name, want), got) in model.bn_names.iter().zip(&model.bn).zip(&bn) {
            if want.mean.len() != got.mean.len() || want.var.len() != got.var.len() {
                return Err(Error::Config(format!(
                    "{name}: expected {} channels, got {}",
                    want.mean.len(),
                    got.mean.len()
                )));
            }
        }
        model.params = params.into_iter().map(Tensor::with_grad).collect();
        model.bn = bn;
        Ok(model)
    }

    /// Converts every parameter and running statistic to element type `U`.
    pub fn cast<U: Scalar>(&self) -> SiameseNet<U> {
        let conv = |v: &[T]| {
            v.iter()
                .map(|x| U::from_f64_lossy(x.to_f64().unwrap()))
                .collect()
        };
        SiameseNet {
            config: self.config,
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast::<U>()).collect(),
            bn_names: self.bn_names.clone(),
            bn: self
                .bn
                .iter()
                .map(|s| RunningStats {
                    mean: conv(&s.mean),
                    var: conv(&s.var),
                })
                .collect(),
        }
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn parameter_list(&self) -> Vec<(&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(&self.params)
            .collect()
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn bn_stats(&self) -> &[RunningStats<T>] {
        &self.bn
    }

    pub fn bn_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.bn
    }

    /// Records every parameter as a graph leaf. With `trainable == false`
    /// the leaves are constants and no gradient bookkeeping happens.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.leaf(p) } else { g.constant(p) })
            .collect();
        ParamVars { vars }
    }

    fn check_input(&self, g: &Graph<T>, image: Var) -> Result<()> {
        let shape = g.shape(image);
        let [_, c, h, w] = crate::tensor::as_dims4("encode", shape)?;
        if c != self.config.in_channels {
            return Err(Error::Config(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::shape(
                "encode",
                format!("height and width must be divisible by {SPATIAL_MULTIPLE}, got {h}×{w}"),
            ));
        }
        Ok(())
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        p: &[Var],
        bn_layer: usize,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let zero_bias = g.constant(&Tensor::zeros(vec![g.shape(p[0])[0]]));
        let c = g.conv2d(x, p[0], zero_bias)?;
        let (b, stats) = g.batchnorm2d(
            c,
            p[1],
            p[2],
            Some(&self.bn[bn_layer]),
            mode,
            T::from_f64_lossy(BN_EPS),
        )?;
        if let Some(stats) = stats {
            updates.push(BnUpdate {
                layer: bn_layer,
                stats,
            });
        }
        Ok(g.relu(b))
    }

    /// Runs the shared encoder on one acquisition.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        params: &ParamVars,
        image: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<FeaturePyramid> {
        self.check_input(g, image)?;
        let mut x = image;
        let mut levels = [image; LEVELS];
        for (l, level) in levels.iter_mut().enumerate() {
            let p = &params.vars[l * ENC_STRIDE..(l + 1) * ENC_STRIDE];
            let r = self.block(g, x, p, l, mode, updates)?;
            x = g.maxpool2x2(r)?;
            *level = x;
        }
        Ok(FeaturePyramid { levels })
    }

    /// Full forward pass with the same parameter handles for both branches.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &ParamVars,
        pre: Var,
        post: Var,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        self.forward_with(g, params, pre, post, mode, BranchNorm::default())
    }

    /// Full forward pass with an explicit train-mode batch-norm policy.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        params: &ParamVars,
        pre: Var,
        post: Var,
        mode: Mode,
        norm: BranchNorm,
    ) -> Result<ForwardPass<T>> {
        match norm {
            BranchNorm::Separate => self.forward_branches(g, params, params, pre, post, mode),
            BranchNorm::Joint => {
                if g.shape(pre) != g.shape(post) {
                    return Err(Error::mismatch("forward", g.shape(pre), g.shape(post)));
                }
                let n = g.shape(pre)[0];
                let mut bn_updates = Vec::new();
                let both = g.concat_batch(pre, post)?;
                let joint = self.encode(g, params, both, mode, &mut bn_updates)?;
                let mut f_pre = joint;
                let mut f_post = joint;
                for l in 0..LEVELS {
                    f_pre.levels[l] = g.slice_batch(joint.levels[l], 0, n)?;
                    f_post.levels[l] = g.slice_batch(joint.levels[l], n, 2 * n)?;
                }
                self.difference_and_decode(g, params, f_pre, f_post, mode, bn_updates)
            }
        }
    }

    /// Forward pass where the pre-fire encoder reads `pre_params` and the
    /// post-fire encoder and the decoder read `post_params`. Each branch is a
    /// separate encoder pass with its own train-mode batch statistics.
    ///
    /// With distinct bindings of the same values this splits the shared
    /// encoder gradient into its two per-branch contributions.
    pub fn forward_branches(
        &self,
        g: &mut Graph<T>,
        pre_params: &ParamVars,
        post_params: &ParamVars,
        pre: Var,
        post: Var,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        if g.shape(pre) != g.shape(post) {
            return Err(Error::mismatch("forward", g.shape(pre), g.shape(post)));
        }
        let mut bn_updates = Vec::new();
        let f_pre = self.encode(g, pre_params, pre, mode, &mut bn_updates)?;
        let f_post = self.encode(g, post_params, post, mode, &mut bn_updates)?;
        self.difference_and_decode(g, post_params, f_pre, f_post, mode, bn_updates)
    }

    fn difference_and_decode(
        &self,
        g: &mut Graph<T>,
        params: &ParamVars,
        f_pre: FeaturePyramid,
        f_post: FeaturePyramid,
        mode: Mode,
        mut bn_updates: Vec<BnUpdate<T>>,
    ) -> Result<ForwardPass<T>> {
        let mut diffs = f_pre.levels;
        for (l, d) in diffs.iter_mut().enumerate() {
            *d = g.sub(f_post.levels[l], f_pre.levels[l])?;
        }

        let p = &params.vars;
        let mut x = diffs[LEVELS - 1];
        for (j, level) in (1..LEVELS).rev().enumerate() {
            let base = DEC_BASE + j * DEC_STRIDE;
            let up = g.upconv2x2(x, p[base], p[base + 1])?;
            let cat = g.concat_channels(up, diffs[level - 1])?;
            x = self.block(
                g,
                cat,
                &p[base + 2..base + 5],
                LEVELS + j,
                mode,
                &mut bn_updates,
            )?;
        }
        let full = g.upconv2x2(x, p[FINAL_BASE], p[FINAL_BASE + 1])?;
        let logits = g.conv2d(full, p[FINAL_BASE + 2], p[FINAL_BASE + 3])?;
        let probs = g.sigmoid(logits);
        Ok(ForwardPass {
            probs,
            pre: f_pre,
            post: f_post,
            diffs: DifferencePyramid { levels: diffs },
            bn_updates,
        })
    }

    /// Folds train-mode batch statistics into the running statistics, in order.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for u in updates {
            self.bn[u.layer].update(&u.stats, m);
        }
    }

    /// Copies gradients from `g` into each parameter's `grad`.
    pub fn store_grads(&mut self, g: &Graph<T>, params: &ParamVars) {
        for (t, &v) in self.params.iter_mut().zip(&params.vars) {
            g.write_grad(v, t);
        }
    }

    /// Eval-mode probabilities for a batch of N×C×H×W pre/post tensors.
    pub fn predict_proba(&self, pre: &Tensor<T>, post: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let (a, b) = (g.constant(pre), g.constant(post));
        let pass = self.forward(&mut g, &params, a, b, Mode::Eval)?;
        Ok(g.tensor(pass.probs))
    }
}
