use rand::Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::Tensor;

/// Denominator floor in the relative error `|a − n| / max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

// Keeps the projection stream distinct from streams callers use for inputs.
const PROJECTION_SALT: u64 = 0xa076_1d64_78bd_642f;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, element index, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSpec {
    /// Central-difference step, within `[1e-6, 1e-3]`.
    pub eps: f64,
    /// Seed for the projection used to reduce non-scalar outputs.
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec { eps: 1e-5, seed: 0 }
    }
}

/// Compares analytic gradients of `f` against central finite differences.
///
/// Every input with `requires_grad` is probed element by element. Non-scalar
/// outputs are reduced to a scalar by a fixed random projection first.
pub fn gradcheck<F>(
    op: &str,
    inputs: &[Tensor<f64>],
    spec: GradCheckSpec,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&spec.eps) {
        return Err(Error::Config(format!(
            "gradcheck eps {} outside [1e-6, 1e-3]",
            spec.eps
        )));
    }

    let eval = |values: &[Tensor<f64>], analytic: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t)).collect();
        let out = f(&mut g, &vars)?;
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let mut rng = Xoshiro256::seed_from_u64(spec.seed ^ PROJECTION_SALT);
            let coeffs = (0..g.value(out).len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            g.weighted_sum(out, coeffs)?
        };
        let value = g.value(loss)[0];
        let grads = if analytic {
            g.backward(loss)?;
            vars.iter()
                .map(|&v| g.grad(v).map(<[f64]>::to_vec))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut worst = None;
    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let ga = analytic[ti]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("input {ti} received no gradient")))?;
        for (ei, (&orig, &a)) in input.data().iter().zip(ga).enumerate() {
            probe[ti].data_mut()[ei] = orig + spec.eps;
            let (fp, _) = eval(&probe, false)?;
            probe[ti].data_mut()[ei] = orig - spec.eps;
            let (fm, _) = eval(&probe, false)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * spec.eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((ti, ei, a, numeric));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: max_rel,
        checked,
        worst,
    })
}
