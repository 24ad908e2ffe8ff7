//! Adam training loop, per-sample evaluation, and the parameter-space
//! gradient suite.

use super::config::ModelConfig;
use super::net::{backward, forward, predicted_edit, ModelInputs};
use super::params::ModelParams;
use crate::edit::{masked_scale_factor, scale_align, SCALE_EPS};
use crate::error::{Error, Result};
use crate::gradcheck::rel_error;
use crate::loss::{loss_total, loss_total_with_grad, LossReport, LossWeights};
use crate::synth::EditPair;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Base learning rate from the training recipe.
pub const DEFAULT_LR: f64 = 1e-4;

/// First and second moment buffers plus the step counter.
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    t: u64,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
            t: 0,
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps (`step` is 0-based).
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let ratio = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos())
}

/// One optimization step: forward, loss, reverse pass, Adam update at the
/// given effective learning rate. Returns the pre-update loss report.
pub fn train_step(
    pair: &EditPair,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    weights: &LossWeights,
    opt: &mut AdamState,
    lr: f64,
) -> Result<LossReport> {
    let inputs = ModelInputs::from(pair);
    let trace = forward(&inputs, params, cfg)?;
    let (report, grad_delta) = loss_total_with_grad(
        &pair.base,
        &trace.delta,
        &pair.gt,
        &pair.mask,
        &pair.cams,
        weights,
    )?;
    if !report.is_finite() {
        return Err(Error::Train(format!(
            "non-finite loss: {}",
            report.to_kv().replace('\n', " ")
        )));
    }
    let grads = backward(&inputs, params, cfg, &trace, &grad_delta)?;

    opt.t += 1;
    let t = opt.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .arrays_mut()
        .into_iter()
        .zip(grads.arrays())
        .zip(opt.m.arrays_mut().into_iter().zip(opt.v.arrays_mut()))
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    if !params.all_finite() {
        return Err(Error::Train(
            "non-finite parameter after optimizer step".into(),
        ));
    }
    Ok(report)
}

/// Deterministic training over a pair list (round-robin), cosine-decayed
/// Adam. `on_step` observes every pre-update loss report.
pub fn train_loop(
    pairs: &[EditPair],
    cfg: &ModelConfig,
    weights: &LossWeights,
    steps: usize,
    lr: f64,
    seed: u64,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<ModelParams> {
    if pairs.is_empty() {
        return Err(Error::Domain("training needs at least one pair".into()));
    }
    let mut params = ModelParams::init(cfg, seed);
    let mut opt = AdamState::new(cfg);
    for step in 0..steps {
        let pair = &pairs[step % pairs.len()];
        let lr_t = cosine_lr(lr, step, steps);
        let report = train_step(pair, &mut params, cfg, weights, &mut opt, lr_t)
            .map_err(|e| Error::Train(format!("step {step}: {e}")))?;
        on_step(step, &report);
    }
    Ok(params)
}

/// Geometric evaluation of one pair under the current parameters.
#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    /// Mean masked distance between the aligned prediction and the target.
    pub masked_err: f64,
    /// Mean unmasked distance between the edited and base maps. Identically
    /// zero under masked residual application.
    pub background_drift: f64,
    /// Max deviation of per-view masked centroids from their mean.
    pub centroid_dev: f64,
}

pub fn evaluate_pair(
    pair: &EditPair,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EvalMetrics> {
    let inputs = ModelInputs::from(pair);
    let trace = forward(&inputs, params, cfg)?;
    let edited = predicted_edit(&inputs, &trace, cfg)?;
    let mask_count = pair.mask.count();
    let aligned = if mask_count > 0 {
        let align = masked_scale_factor(&edited, &pair.gt, &pair.mask, SCALE_EPS)?;
        scale_align(&edited, &align)
    } else {
        edited.clone()
    };

    let mut masked_err = 0.0;
    let mut drift = 0.0;
    let mut outside = 0usize;
    for (i, &bit) in pair.mask.values().iter().enumerate() {
        let mut d_sq = 0.0;
        let mut b_sq = 0.0;
        for c in 0..3 {
            let da = aligned.values()[i * 3 + c] - pair.gt.values()[i * 3 + c];
            d_sq += da * da;
            let db = edited.values()[i * 3 + c] - pair.base.values()[i * 3 + c];
            b_sq += db * db;
        }
        if bit == 1 {
            masked_err += d_sq.sqrt();
        } else {
            drift += b_sq.sqrt();
            outside += 1;
        }
    }
    if mask_count > 0 {
        masked_err /= mask_count as f64;
    }
    if outside > 0 {
        drift /= outside as f64;
    }

    // Per-view masked centroids of the aligned prediction.
    let mut centroids = Vec::new();
    for n in 0..pair.base.views {
        let mut acc = nalgebra::Vector3::zeros();
        let mut count = 0usize;
        for h in 0..pair.base.height {
            for w in 0..pair.base.width {
                if pair.mask.get(n, h, w) == 1 {
                    acc += aligned.point(n, h, w);
                    count += 1;
                }
            }
        }
        if count > 0 {
            centroids.push(acc / count as f64);
        }
    }
    let centroid_dev = if centroids.len() < 2 {
        0.0
    } else {
        let mean = centroids.iter().sum::<nalgebra::Vector3<f64>>() / centroids.len() as f64;
        centroids
            .iter()
            .map(|c| (c - mean).norm())
            .fold(0.0, f64::max)
    };

    Ok(EvalMetrics {
        masked_err,
        background_drift: drift,
        centroid_dev,
    })
}

/// Gradient-suite result for one parameter array.
#[derive(Debug, Clone)]
pub struct ArrayCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Check every coordinate of every parameter array of L_total against central
/// finite differences. Parameters are restored on return.
pub fn gradcheck_params(
    pair: &EditPair,
    cfg: &ModelConfig,
    weights: &LossWeights,
    params: &mut ModelParams,
    step: f64,
) -> Result<Vec<ArrayCheck>> {
    gradcheck_params_with_control(pair, cfg, weights, params, step, None)
}

/// [`gradcheck_params`] with an optional negative control: the named array's
/// analytic gradient is doubled before comparison, which a sound harness must
/// report as a failure.
pub fn gradcheck_params_with_control(
    pair: &EditPair,
    cfg: &ModelConfig,
    weights: &LossWeights,
    params: &mut ModelParams,
    step: f64,
    corrupt_array: Option<&str>,
) -> Result<Vec<ArrayCheck>> {
    let loss_of = |params: &ModelParams| -> Result<f64> {
        let trace = forward(&ModelInputs::from(pair), params, cfg)?;
        Ok(loss_total(
            &pair.base,
            &trace.delta,
            &pair.gt,
            &pair.mask,
            &pair.cams,
            weights,
        )?
        .total)
    };
    let trace = forward(&ModelInputs::from(pair), params, cfg)?;
    let (_, grad_delta) = loss_total_with_grad(
        &pair.base,
        &trace.delta,
        &pair.gt,
        &pair.mask,
        &pair.cams,
        weights,
    )?;
    let grads = backward(&ModelInputs::from(pair), params, cfg, &trace, &grad_delta)?;

    let names: Vec<String> = grads.arrays().into_iter().map(|(n, _)| n).collect();
    let mut analytic: Vec<Vec<f64>> = grads.arrays().into_iter().map(|(_, a)| a.clone()).collect();
    if let Some(target) = corrupt_array {
        let idx = names
            .iter()
            .position(|n| n == target)
            .ok_or_else(|| Error::Domain(format!("no parameter array named {target:?}")))?;
        analytic[idx].iter_mut().for_each(|g| *g *= 2.0);
    }
    let mut checks = Vec::with_capacity(names.len());
    for (ai, name) in names.iter().enumerate() {
        let len = analytic[ai].len();
        let mut check = ArrayCheck {
            name: name.clone(),
            checked: len,
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for i in 0..len {
            let orig = params.array_mut(ai)[i];
            params.array_mut(ai)[i] = orig + step;
            let up = loss_of(params)?;
            params.array_mut(ai)[i] = orig - step;
            let down = loss_of(params)?;
            params.array_mut(ai)[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = rel_error(analytic[ai][i], numeric);
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
        }
        checks.push(check);
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{DEFAULT_STEP, DEFAULT_TOL};
    use crate::synth;

    fn tiny_pair() -> EditPair {
        let (spec, op) = synth::random_pair(21, 2, 8, 8, 0.0).unwrap();
        synth::apply_edit(&spec, &op).unwrap()
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-4, 0, 100), 1e-4);
        assert!((cosine_lr(1e-4, 50, 100) - 5e-5).abs() < 1e-18);
        assert!(cosine_lr(1e-4, 100, 100) < 1e-19);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let pair = tiny_pair();
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::init(&cfg, 5);
        let snapshot = params.clone();
        let mut opt = AdamState::new(&cfg);
        let report = train_step(
            &pair,
            &mut params,
            &cfg,
            &LossWeights::default(),
            &mut opt,
            0.0,
        )
        .unwrap();
        assert!(report.total.is_finite());
        assert_eq!(params, snapshot);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let pair = tiny_pair();
        let cfg = ModelConfig::tiny();
        let weights = LossWeights::default();
        let mut reports_a = Vec::new();
        let pa = train_loop(
            std::slice::from_ref(&pair),
            &cfg,
            &weights,
            10,
            1e-4,
            33,
            |_, r| {
                reports_a.push(r.clone());
            },
        )
        .unwrap();
        let mut reports_b = Vec::new();
        let pb = train_loop(
            std::slice::from_ref(&pair),
            &cfg,
            &weights,
            10,
            1e-4,
            33,
            |_, r| {
                reports_b.push(r.clone());
            },
        )
        .unwrap();
        assert_eq!(pa, pb);
        assert_eq!(reports_a.len(), 10);
        for (a, b) in reports_a.iter().zip(&reports_b) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.edit.to_bits(), b.edit.to_bits());
        }
    }

    #[test]
    fn loss_decreases_over_short_training() {
        let pair = tiny_pair();
        let cfg = ModelConfig::tiny();
        let weights = LossWeights::default();
        let mut first = None;
        let mut last = None;
        train_loop(
            std::slice::from_ref(&pair),
            &cfg,
            &weights,
            60,
            1e-3,
            1,
            |i, r| {
                if i == 0 {
                    first = Some(r.total);
                }
                last = Some(r.total);
            },
        )
        .unwrap();
        assert!(last.unwrap() < first.unwrap());
    }

    #[test]
    fn background_drift_is_zero_under_masked_application() {
        let pair = tiny_pair();
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 6);
        let metrics = evaluate_pair(&pair, &params, &cfg).unwrap();
        assert_eq!(metrics.background_drift, 0.0);
        assert!(metrics.masked_err.is_finite());
    }

    #[test]
    fn full_parameter_gradcheck_tiny_config() {
        // Every parameter array of L_total against central differences.
        let pair = tiny_pair();
        let cfg = ModelConfig::tiny();
        let mut params = ModelParams::init(&cfg, 7);
        let checks = gradcheck_params(
            &pair,
            &cfg,
            &LossWeights::default(),
            &mut params,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(!checks.is_empty());
        for c in &checks {
            assert!(
                c.max_rel_error < DEFAULT_TOL,
                "{}: {} at index {}",
                c.name,
                c.max_rel_error,
                c.worst_index
            );
        }
    }
}
