//! Finite-difference verification of [`Model::backward`].
//!
//! Central differences at eps on every parameter of a seeded micro model,
//! against the analytic gradient of mean BCE. A coordinate is skipped when
//! the ReLU sign masks of the +eps and -eps forwards differ (the
//! difference interval crossed a kink, where the loss is not
//! differentiable). Relative error uses a 1e-6 floor so that dead
//! coordinates with ~1e-12 finite-difference noise do not read as 1e-0
//! failures.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::seed;

use super::ops::Act;
use super::{build_model, loss_bce, DenseBlockSpec, ModelConfig};

/// Small enough to finite-difference in well under a minute while still
/// exercising every op: 3x3 convs, 1x1 transition conv, batch norm,
/// concatenation, average pool, GAP, FC and sigmoid+BCE.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        input: (1, 8, 8),
        stem_channels: 4,
        blocks: vec![
            DenseBlockSpec { layers: 2, growth: 3 },
            DenseBlockSpec { layers: 2, growth: 3 },
        ],
    }
}

#[derive(Debug, Clone)]
pub struct LayerError {
    pub layer: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_layer: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub skipped: usize,
    pub per_layer: Vec<LayerError>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

pub fn grad_check(config: &ModelConfig, check_seed: u64, eps: f64) -> Result<GradCheckReport> {
    grad_check_with(config, check_seed, eps, false)
}

/// `corrupt_backward` injects an error into one analytic gradient
/// coordinate; the negative control for the verifier itself.
pub fn grad_check_with(
    config: &ModelConfig,
    check_seed: u64,
    eps: f64,
    corrupt_backward: bool,
) -> Result<GradCheckReport> {
    let mut model = build_model(config, check_seed)?;
    // The head is zero-initialized, which would zero every upstream
    // gradient; randomize it so all paths carry signal.
    let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(check_seed, &[1]));
    let head: Vec<f64> = (0..model.head_channels())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    model.set_head(&head, rng.random_range(-0.1..0.1))?;

    let (c, h, w) = model.config.input;
    let mut batch = Act::zeros(2, c, h, w);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut irng = ChaCha8Rng::seed_from_u64(seed::mix(check_seed, &[2]));
    for v in batch.data.iter_mut() {
        *v = 0.5 + 0.5 * normal.sample(&mut irng);
    }
    let labels = vec![1.0, 0.0];

    let mut analytic = {
        let mut m = model.clone();
        let (_, tape) = m.forward_train(&batch)?;
        m.backward(&tape, &labels)?
    };
    if corrupt_backward && !analytic.is_empty() {
        analytic[0] += 1.0;
    }

    let eval = |params_override: &[f64]| -> Result<(f64, Vec<bool>)> {
        let mut m = model.clone();
        m.params.copy_from_slice(params_override);
        let (probs, tape) = m.forward_train(&batch)?;
        Ok((loss_bce(&probs, &labels), tape.relu_mask()))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_layer: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped: 0,
        per_layer: Vec::new(),
    };
    let mut per_layer: Vec<(String, f64)> = model
        .regions()
        .map(|(name, _)| (name.to_string(), 0.0))
        .collect();

    let mut params = model.params.clone();
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let (loss_plus, mask_plus) = eval(&params)?;
        params[i] = orig - eps;
        let (loss_minus, mask_minus) = eval(&params)?;
        params[i] = orig;

        if mask_plus != mask_minus {
            report.skipped += 1;
            continue;
        }
        let numeric = (loss_plus - loss_minus) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        report.checked += 1;
        let name = model.region_name(i);
        if let Some(slot) = per_layer.iter_mut().find(|(n, _)| n == name) {
            slot.1 = slot.1.max(rel);
        }
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_layer = name.to_string();
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }

    report.per_layer = per_layer
        .into_iter()
        .map(|(layer, max_rel_err)| LayerError { layer, max_rel_err })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_model_gradients_match_finite_differences() {
        let report = grad_check(&micro_config(), 42, 1e-4).unwrap();
        assert!(report.checked > 500, "checked only {}", report.checked);
        assert!(
            report.passed(1e-4),
            "max rel err {} at {} (analytic {} vs numeric {})",
            report.max_rel_err,
            report.worst_layer,
            report.worst_analytic,
            report.worst_numeric
        );
        // skipping should be rare on a random micro model
        assert!(report.skipped < report.checked / 10);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let report = grad_check_with(&micro_config(), 42, 1e-4, true).unwrap();
        assert!(!report.passed(1e-4));
    }
}
