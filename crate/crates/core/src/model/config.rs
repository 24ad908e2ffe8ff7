//! Model configuration, the injection schedule, and the key-value settings
//! format shared by the CLI.

use crate::error::{Error, Result};
use crate::loss::LossWeights;

/// Decoder and conditioning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Patch edge length in pixels.
    pub token_patch: usize,
    /// Token width d.
    pub model_dim: usize,
    pub heads: usize,
    /// Decoder depth D (1-indexed layers).
    pub depth: usize,
    /// Injection stride k; text enters at layers {l*k + 1}.
    pub injection_stride: usize,
    pub injection_count: usize,
    pub vocab_size: usize,
    /// Off: inject only at layer 1.
    pub sync_attn: bool,
    /// Off: fixed uniform view weights 1/N.
    pub view_weighting: bool,
    /// Off: the head output is absolute geometry instead of a residual field.
    pub residual_head: bool,
    /// On: collapse the instruction embedding to a single mean-pooled token.
    pub pooled_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_patch: 4,
            model_dim: 64,
            heads: 4,
            depth: 10,
            injection_stride: 2,
            injection_count: 5,
            vocab_size: 64,
            sync_attn: true,
            view_weighting: true,
            residual_head: true,
            pooled_text: false,
        }
    }
}

impl ModelConfig {
    /// Paper-parity schedule: stride 8 over 33 decoder layers.
    pub fn paper_parity() -> Self {
        Self {
            injection_stride: 8,
            depth: 33,
            ..Self::default()
        }
    }

    /// Tiny configuration used by the gradient suite.
    pub fn tiny() -> Self {
        Self {
            token_patch: 4,
            model_dim: 16,
            heads: 2,
            depth: 5,
            injection_stride: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_patch == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.depth == 0
            || self.injection_count == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.injection_stride == 0 {
            return Err(Error::Config("injection_stride must be >= 1".into()));
        }
        let deepest = self.injection_stride * (self.injection_count - 1) + 1;
        if self.depth < deepest {
            return Err(Error::Config(format!(
                "depth {} too shallow for injection schedule reaching layer {deepest}",
                self.depth
            )));
        }
        Ok(())
    }

    /// 1-indexed layers receiving text cross-attention.
    pub fn schedule(&self) -> Vec<usize> {
        (0..self.injection_count)
            .map(|l| l * self.injection_stride + 1)
            .collect()
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Patch-token input width: 3p^2 point values + p^2 mask + p^2 confidence.
    pub fn patch_input_dim(&self) -> usize {
        5 * self.token_patch * self.token_patch
    }
}

/// The five-entry injection layer list `{l*k + 1}` for `l = 0..4`.
pub fn injection_schedule(k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::Domain(format!(
            "injection stride must be >= 1, got {k}"
        )));
    }
    Ok((0..5).map(|l| l * k + 1).collect())
}

/// Width of the view-descriptor MLP hidden layer.
pub const VIEW_HIDDEN: usize = 16;

/// Settings parsed from a `key = value` config file: model shape, loss
/// weights, and the base learning rate. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            lr: 1e-4,
        }
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected an integer, got {value:?}")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl RunSettings {
    /// Apply `key = value` pairs on top of the defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut s = Self::default();
        for (key, value) in pairs {
            match key.as_str() {
                "token_patch" => s.model.token_patch = parse_usize(key, value)?,
                "model_dim" => s.model.model_dim = parse_usize(key, value)?,
                "heads" => s.model.heads = parse_usize(key, value)?,
                "depth" => s.model.depth = parse_usize(key, value)?,
                "injection_stride" => s.model.injection_stride = parse_usize(key, value)?,
                "injection_count" => s.model.injection_count = parse_usize(key, value)?,
                "vocab_size" => s.model.vocab_size = parse_usize(key, value)?,
                "sync_attn" => s.model.sync_attn = parse_bool(key, value)?,
                "view_weighting" => s.model.view_weighting = parse_bool(key, value)?,
                "residual_head" => s.model.residual_head = parse_bool(key, value)?,
                "pooled_text" => s.model.pooled_text = parse_bool(key, value)?,
                "lambda_edit" => s.weights.edit = parse_f64(key, value)?,
                "lambda_pres" => s.weights.pres = parse_f64(key, value)?,
                "lambda_normal" => s.weights.normal = parse_f64(key, value)?,
                "lambda_cam" => s.weights.cam = parse_f64(key, value)?,
                "lambda_delta" => s.weights.delta = parse_f64(key, value)?,
                "lr" => s.lr = parse_f64(key, value)?,
                other => {
                    return Err(Error::Config(format!("unknown config key {other:?}")));
                }
            }
        }
        s.model.validate()?;
        s.weights.validate()?;
        if !(s.lr.is_finite() && s.lr >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be nonnegative, got {}",
                s.lr
            )));
        }
        Ok(s)
    }

    /// Serialize in the same `key = value` format.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let w = &self.weights;
        format!(
            "token_patch = {}\nmodel_dim = {}\nheads = {}\ndepth = {}\n\
             injection_stride = {}\ninjection_count = {}\nvocab_size = {}\n\
             sync_attn = {}\nview_weighting = {}\nresidual_head = {}\npooled_text = {}\n\
             lambda_edit = {}\nlambda_pres = {}\nlambda_normal = {}\nlambda_cam = {}\nlambda_delta = {}\n\
             lr = {}\n",
            m.token_patch,
            m.model_dim,
            m.heads,
            m.depth,
            m.injection_stride,
            m.injection_count,
            m.vocab_size,
            m.sync_attn,
            m.view_weighting,
            m.residual_head,
            m.pooled_text,
            w.edit,
            w.pres,
            w.normal,
            w.cam,
            w.delta,
            self.lr,
        )
    }
}
