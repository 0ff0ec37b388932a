//! Finite-difference gradient checking.
//!
//! The checker compares tape gradients against central differences of the
//! same scalar function, sampling coordinates across all trainable groups.
//! Relative error uses a floored denominator so near-zero coordinates are
//! held to an absolute standard instead of dividing by noise:
//! `|a - n| / max(|a|, |n|, floor)`.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{CoreError, Result};
use crate::params::ParamRegistry;
use crate::scalar::Scalar;

/// Scalar loss with optional gradients, as produced by one tape pass.
pub struct EvalOutput<S: Scalar> {
    pub loss: f64,
    pub grads: Option<HashMap<String, Vec<S>>>,
}

#[derive(Debug, Clone)]
pub struct CheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of coordinates to sample (uniform over trainable coordinates).
    pub samples: usize,
    pub seed: u64,
    /// Denominator floor for the relative error: coordinates whose
    /// gradients sit below it are held to the absolute standard
    /// `floor * tolerance` instead of dividing by noise.
    pub rel_floor: f64,
    /// Combine differences at `step` and `step/2` to cancel the O(h^2)
    /// truncation term, so a larger step can sit above the roundoff
    /// floor of the function's own precision.
    pub richardson: bool,
}

impl CheckConfig {
    /// Defaults tuned for an f32 pipeline: the loss carries roughly 1e-7
    /// relative rounding noise per eval, so the extrapolated step stays
    /// large and near-zero gradients are compared at 2e-2 scale.
    pub fn single(samples: usize) -> Self {
        CheckConfig { step: 1e-2, samples, seed: 7, rel_floor: 2e-2, richardson: true }
    }

    /// Defaults tuned for an f64 pipeline.
    pub fn double(samples: usize) -> Self {
        CheckConfig { step: 2e-5, samples, seed: 7, rel_floor: 1e-5, richardson: false }
    }
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub group: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_err: f64,
    /// Descriptions of non-finite values hit during checking. Never empty
    /// when something went non-finite; callers must look.
    pub non_finite: Vec<String>,
}

impl CheckReport {
    pub fn ok(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err < tol
    }
}

/// Check tape gradients of `f` against central finite differences.
///
/// `f` must be a deterministic scalar-valued function of the registry;
/// it is called once with `want_grads = true` at the base point and twice
/// per sampled coordinate for the difference quotient. The registry is
/// restored to its original values before returning.
pub fn grad_check<S, F>(
    f: &F,
    params: &mut ParamRegistry<S>,
    cfg: &CheckConfig,
) -> Result<CheckReport>
where
    S: Scalar,
    F: Fn(&ParamRegistry<S>, bool) -> Result<EvalOutput<S>>,
{
    let trainable = params.trainable_names();
    if trainable.is_empty() {
        return Err(CoreError::InvalidSpec("grad_check needs at least one trainable group".into()));
    }

    let base = f(params, true)?;
    let mut report = CheckReport::default();
    if !base.loss.is_finite() {
        report.non_finite.push(format!("loss at base point: {}", base.loss));
    }
    let grads = base
        .grads
        .ok_or_else(|| CoreError::InvalidSpec("function returned no gradients".into()))?;
    for name in &trainable {
        if !grads.contains_key(name) {
            return Err(CoreError::UnknownGroup(format!("no gradient for group '{}'", name)));
        }
    }

    // Uniform sampling over all trainable coordinates.
    let sizes: Vec<(String, usize)> = trainable
        .iter()
        .map(|n| (n.clone(), params.get(n).unwrap().tensor.numel()))
        .collect();
    let total: usize = sizes.iter().map(|(_, n)| n).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for _ in 0..cfg.samples {
        let mut flat = rng.gen_range(0..total);
        let (group, index) = sizes
            .iter()
            .find_map(|(name, n)| {
                if flat < *n {
                    Some((name.clone(), flat))
                } else {
                    flat -= n;
                    None
                }
            })
            .expect("flat index within total");

        let original = params.get(&group)?.tensor.data[index];
        // Snap each step to one exactly representable in S around the
        // original value, so the difference quotient uses the true step.
        let central = |h: f64, params: &mut ParamRegistry<S>| -> Result<f64> {
            let plus = original + S::from_f64(h);
            let minus = original - S::from_f64(h);
            let true_step = (plus.as_f64() - minus.as_f64()) / 2.0;
            params.get_mut(&group)?.tensor.data[index] = plus;
            let loss_plus = f(params, false)?.loss;
            params.get_mut(&group)?.tensor.data[index] = minus;
            let loss_minus = f(params, false)?.loss;
            params.get_mut(&group)?.tensor.data[index] = original;
            Ok((loss_plus - loss_minus) / (2.0 * true_step))
        };
        let numeric = if cfg.richardson {
            let coarse = central(cfg.step, params)?;
            let fine = central(cfg.step / 2.0, params)?;
            (4.0 * fine - coarse) / 3.0
        } else {
            central(cfg.step, params)?
        };
        let analytic = grads[&group][index].as_f64();
        if !numeric.is_finite() || !analytic.is_finite() {
            report.non_finite.push(format!(
                "{}[{}]: analytic {} numeric {}",
                group, index, analytic, numeric
            ));
        }
        let rel_err =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.rel_floor);
        if rel_err > report.max_rel_err || report.coords.is_empty() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
        }
        report.coords.push(CoordCheck { group, index, analytic, numeric, rel_err });
    }

    Ok(report)
}
