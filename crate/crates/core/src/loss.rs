//! Weighted binary cross-entropy + Dice training objective.
//!
//! The canonical form is the convex combination
//! `L = α·BCE_w + (1 − α)·Dice`. The additive form `BCE_w + λ·Dice` with
//! `λ = (1 − α)/α` gives the same loss scaled by `1/α`.
//!
//! Targets are masks with values 0, 1 and [`NODATA`]; nodata pixels contribute
//! neither to the loss nor to its gradient.

use crate::autodiff::{Graph, LossTarget, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const NODATA: u8 = 255;

/// Bounds of the automatic positive-class weight `N_neg / N_pos`.
pub const AUTO_POS_WEIGHT_MIN: f64 = 1.0;
pub const AUTO_POS_WEIGHT_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PosWeight {
    Fixed(f64),
    /// `clamp(N_neg / N_pos, 1, 100)` over the valid pixels of each batch.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the BCE term.
    pub alpha: f64,
    pub pos_weight: PosWeight,
    /// Smoothing added to the Dice numerator and denominator.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            pos_weight: PosWeight::Auto,
            dice_eps: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.dice_eps.is_nan() || self.dice_eps <= 0.0 {
            return Err(Error::Config(format!(
                "dice_eps {} must be positive",
                self.dice_eps
            )));
        }
        if let PosWeight::Fixed(w) = self.pos_weight {
            check_pos_weight(w)?;
        }
        Ok(())
    }

    /// λ of the additive form; undefined for α = 0.
    pub fn lambda_dice(&self) -> Option<f64> {
        (self.alpha > 0.0).then(|| (1.0 - self.alpha) / self.alpha)
    }

    pub fn resolve_pos_weight(&self, target: &[u8]) -> f64 {
        match self.pos_weight {
            PosWeight::Fixed(w) => w,
            PosWeight::Auto => auto_pos_weight(target),
        }
    }
}

fn check_pos_weight(w: f64) -> Result<()> {
    if w > 0.0 && w.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("pos_weight {w} must be positive")))
    }
}

/// `clamp(N_neg / N_pos, 1, 100)`; a batch without positives gets the upper bound.
pub fn auto_pos_weight(target: &[u8]) -> f64 {
    let pos = target.iter().filter(|&&m| m == 1).count();
    let neg = target.iter().filter(|&&m| m == 0).count();
    if pos == 0 {
        return AUTO_POS_WEIGHT_MAX;
    }
    (neg as f64 / pos as f64).clamp(AUTO_POS_WEIGHT_MIN, AUTO_POS_WEIGHT_MAX)
}

/// Mean over valid pixels of `−[w·y·ln p + (1 − y)·ln(1 − p)]`, with `p`
/// clamped to `[1e-7, 1 − 1e-7]`.
pub fn weighted_bce<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    target: &[u8],
    pos_weight: f64,
) -> Result<Var> {
    check_pos_weight(pos_weight)?;
    g.bce(
        probs,
        LossTarget::from_mask(target),
        T::from_f64_lossy(pos_weight),
    )
}

/// `1 − (2·Σ p·y + ε) / (Σ p + Σ y + ε)` over valid pixels.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &[u8], eps: f64) -> Result<Var> {
    g.dice(probs, LossTarget::from_mask(target), T::from_f64_lossy(eps))
}

/// Graph handles for the combined loss and its two terms.
#[derive(Clone, Copy, Debug)]
pub struct HybridLoss {
    pub total: Var,
    pub bce: Var,
    pub dice: Var,
    pub pos_weight: f64,
}

pub fn hybrid_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Var,
    target: &[u8],
    cfg: &LossConfig,
) -> Result<HybridLoss> {
    cfg.validate()?;
    let pos_weight = cfg.resolve_pos_weight(target);
    let bce = weighted_bce(g, probs, target, pos_weight)?;
    let dice = dice_loss(g, probs, target, cfg.dice_eps)?;
    let a = g.scale(bce, T::from_f64_lossy(cfg.alpha));
    let b = g.scale(dice, T::from_f64_lossy(1.0 - cfg.alpha));
    let total = g.add(a, b)?;
    Ok(HybridLoss {
        total,
        bce,
        dice,
        pos_weight,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::autodiff::{gradcheck, GradCheckSpec};
    use crate::rng::Xoshiro256;
    use crate::tensor::Tensor;

    fn probs_tensor(values: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    fn scalar(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v)[0]
    }

    fn random_case(n: usize, seed: u64) -> (Vec<f64>, Vec<u8>) {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let p = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let y = (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => NODATA,
                1..=3 => 1,
                _ => 0,
            })
            .collect();
        (p, y)
    }

    // Direct transcription of the loss definitions, independent of the graph ops.
    fn bce_oracle(p: &[f64], y: &[u8], w: f64) -> f64 {
        let terms: Vec<f64> = p
            .iter()
            .zip(y)
            .filter(|(_, &m)| m != NODATA)
            .map(
                |(&p, &m)| {
                    if m == 1 {
                        -w * p.ln()
                    } else {
                        -(1.0 - p).ln()
                    }
                },
            )
            .collect();
        terms.iter().sum::<f64>() / terms.len() as f64
    }

    fn dice_oracle(p: &[f64], y: &[u8], eps: f64) -> f64 {
        let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
        for (&p, &m) in p.iter().zip(y) {
            if m == NODATA {
                continue;
            }
            let yv = m as f64;
            inter += p * yv;
            sp += p;
            sy += yv;
        }
        1.0 - (2.0 * inter + eps) / (sp + sy + eps)
    }

    #[test]
    fn bce_half_probability_is_ln2() {
        let mut g = Graph::new();
        let p = g.constant(&probs_tensor(&[0.5]));
        let l = weighted_bce(&mut g, p, &[1], 1.0).unwrap();
        assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_near_perfect_prediction_is_tiny() {
        let y = [1u8, 0, 1, 1, 0];
        let p: Vec<f64> = y
            .iter()
            .map(|&m| if m == 1 { 1.0 - 1e-7 } else { 1e-7 })
            .collect();
        let mut g = Graph::new();
        let pv = g.constant(&probs_tensor(&p));
        let l = weighted_bce(&mut g, pv, &y, 1.0).unwrap();
        assert!(scalar(&g, l) <= 1e-5);
    }

    #[test]
    fn bce_rejects_nonpositive_weight() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(&probs_tensor(&[0.5]));
        assert!(matches!(
            weighted_bce(&mut g, p, &[1], 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            weighted_bce(&mut g, p, &[1], -2.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bce_and_dice_match_direct_formulas() {
        for seed in 0..5 {
            let (p, y) = random_case(200, seed);
            let mut g = Graph::new();
            let pv = g.constant(&probs_tensor(&p));
            let b = weighted_bce(&mut g, pv, &y, 3.5).unwrap();
            let d = dice_loss(&mut g, pv, &y, 1.0).unwrap();
            assert!((scalar(&g, b) - bce_oracle(&p, &y, 3.5)).abs() < 1e-6);
            assert!((scalar(&g, d) - dice_oracle(&p, &y, 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let y = [1u8, 0, 0, 1, 1, 0];
        let p: Vec<f64> = y.iter().map(|&m| m as f64).collect();
        let mut g = Graph::new();
        let pv = g.constant(&probs_tensor(&p));
        let d = dice_loss(&mut g, pv, &y, 1.0).unwrap();
        assert_eq!(scalar(&g, d), 0.0);
    }

    #[test]
    fn dice_all_wrong_analytic() {
        let n = 37;
        let mut g = Graph::new();
        let pv = g.constant(&probs_tensor(&vec![1.0; n]));
        let d = dice_loss(&mut g, pv, &vec![0u8; n], 1.0).unwrap();
        let want = 1.0 - 1.0 / (n as f64 + 1.0);
        assert!((scalar(&g, d) - want).abs() < 1e-12);
    }

    #[test]
    fn dice_and_bce_gradcheck() {
        for seed in 0..3 {
            let (p, y) = random_case(30, seed + 100);
            let x = probs_tensor(&p).with_grad();
            let r = gradcheck(
                "dice_loss",
                std::slice::from_ref(&x),
                GradCheckSpec::default(),
                |g, v| dice_loss(g, v[0], &y, 1.0),
            )
            .unwrap();
            assert!(r.passes(1e-5), "{r:?}");
            let r = gradcheck("weighted_bce", &[x], GradCheckSpec::default(), |g, v| {
                weighted_bce(g, v[0], &y, 2.0)
            })
            .unwrap();
            assert!(r.passes(1e-5), "{r:?}");
        }
    }

    #[test]
    fn hybrid_boundaries_and_midpoint() {
        let (p, y) = random_case(100, 7);
        let eval = |alpha: f64| {
            let cfg = LossConfig {
                alpha,
                pos_weight: PosWeight::Fixed(4.0),
                dice_eps: 1.0,
            };
            let mut g = Graph::new();
            let pv = g.constant(&probs_tensor(&p));
            let h = hybrid_loss(&mut g, pv, &y, &cfg).unwrap();
            (scalar(&g, h.total), scalar(&g, h.bce), scalar(&g, h.dice))
        };
        let (t1, b1, _) = eval(1.0);
        assert_eq!(t1, b1);
        let (t0, _, d0) = eval(0.0);
        assert_eq!(t0, d0);
        let (th, b, d) = eval(0.5);
        let oracle = 0.5 * bce_oracle(&p, &y, 4.0) + 0.5 * dice_oracle(&p, &y, 1.0);
        assert!((th - (b + d) / 2.0).abs() < 1e-7);
        assert!((th - oracle).abs() < 1e-7);
    }

    #[test]
    fn additive_form_is_scaled_convex_form() {
        let (p, y) = random_case(100, 8);
        let cfg = LossConfig {
            alpha: 0.3,
            pos_weight: PosWeight::Auto,
            dice_eps: 1.0,
        };
        let mut g = Graph::new();
        let pv = g.constant(&probs_tensor(&p));
        let h = hybrid_loss(&mut g, pv, &y, &cfg).unwrap();
        let lambda = cfg.lambda_dice().unwrap();
        assert!((lambda - 0.7 / 0.3).abs() < 1e-15);
        let additive = scalar(&g, h.bce) + lambda * scalar(&g, h.dice);
        assert!((cfg.alpha * additive - scalar(&g, h.total)).abs() < 1e-12);
        assert_eq!(LossConfig { alpha: 0.0, ..cfg }.lambda_dice(), None);
    }

    #[test]
    fn auto_weight_clamps() {
        assert_eq!(auto_pos_weight(&[0, 0, 0, 0]), AUTO_POS_WEIGHT_MAX);
        assert_eq!(auto_pos_weight(&[1, 1, 0]), 1.0);
        assert_eq!(auto_pos_weight(&[1, 0, 0, 0, NODATA]), 3.0);
        let mostly_neg: Vec<u8> = std::iter::once(1)
            .chain(std::iter::repeat_n(0, 500))
            .collect();
        assert_eq!(auto_pos_weight(&mostly_neg), 100.0);
    }

    #[test]
    fn hybrid_without_positives_is_finite() {
        let mut g = Graph::new();
        let pv = g.constant(&probs_tensor(&[0.2, 0.4, 0.1]));
        let h = hybrid_loss(&mut g, pv, &[0, 0, 0], &LossConfig::default()).unwrap();
        assert_eq!(h.pos_weight, 100.0);
        assert!(scalar(&g, h.total).is_finite());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            LossConfig {
                alpha: 1.5,
                ..LossConfig::default()
            },
            LossConfig {
                dice_eps: 0.0,
                ..LossConfig::default()
            },
            LossConfig {
                pos_weight: PosWeight::Fixed(0.0),
                ..LossConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_on_hard_masks(bits in proptest::collection::vec(0u8..2, 1..64), flip in proptest::collection::vec(0u8..2, 1..64)) {
            let n = bits.len().min(flip.len());
            let (a, b) = (&bits[..n], &flip[..n]);
            let as_probs = |m: &[u8]| probs_tensor(&m.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let mut g = Graph::new();
            let pa = g.constant(&as_probs(a));
            let pb = g.constant(&as_probs(b));
            let dab = dice_loss(&mut g, pa, b, 1.0).unwrap();
            let dba = dice_loss(&mut g, pb, a, 1.0).unwrap();
            prop_assert_eq!(scalar(&g, dab), scalar(&g, dba));
        }

        #[test]
        fn hybrid_lies_between_components(seed in 0u64..500, alpha in 0.0f64..=1.0) {
            let (p, y) = random_case(40, seed);
            let cfg = LossConfig { alpha, pos_weight: PosWeight::Fixed(2.0), dice_eps: 1.0 };
            let mut g = Graph::new();
            let pv = g.constant(&probs_tensor(&p));
            let h = hybrid_loss(&mut g, pv, &y, &cfg).unwrap();
            let (t, b, d) = (scalar(&g, h.total), scalar(&g, h.bce), scalar(&g, h.dice));
            prop_assert!(t >= b.min(d) - 1e-12 && t <= b.max(d) + 1e-12);
        }
    }
}
