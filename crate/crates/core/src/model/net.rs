//! Forward and reverse passes of the conditioned decoder.
//!
//! Pipeline: patch + pose tokenization of the base point map, a pre-norm
//! transformer over all view tokens jointly, text cross-attention injected at
//! the scheduled layers with per-view sqrt(w_n) key/value gating, and a linear
//! head mapping tokens back to per-patch displacement vectors.
//!
//! The reverse pass is hand-written and is held to central finite differences
//! at 1e-4 relative error over every parameter array (see the gradient suite).

use super::config::{ModelConfig, VIEW_HIDDEN};
use super::params::{InjectParams, ModelParams};
use crate::edit::ResidualField;
use crate::error::{Error, Result};
use crate::geom::{CameraView, EditMask, PointMap};
use crate::synth::EditPair;

/// Per-view reliability descriptor: mask area fraction, boundary ratio,
/// mean confidence, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewDescriptor {
    pub area: f64,
    pub boundary: f64,
    pub confidence: f64,
}

/// Instruction embedding: `len` tokens of width d.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionEmbedding {
    pub tokens: Vec<f64>,
    pub len: usize,
    pub ids: Vec<u16>,
}

/// Everything the model consumes for one sample.
#[derive(Debug, Clone, Copy)]
pub struct ModelInputs<'a> {
    pub base: &'a PointMap,
    pub mask: &'a EditMask,
    pub confidence: &'a [f64],
    pub cams: &'a [CameraView],
    pub tokens: &'a [u16],
}

impl<'a> From<&'a EditPair> for ModelInputs<'a> {
    fn from(pair: &'a EditPair) -> Self {
        ModelInputs {
            base: &pair.base,
            mask: &pair.mask,
            confidence: &pair.confidence,
            cams: &pair.cams,
            tokens: &pair.tokens,
        }
    }
}

// ---------------------------------------------------------------------------
// Dense helpers (row-major weights [out_dim, in_dim], token-major activations)
// ---------------------------------------------------------------------------

fn linear_fwd(
    y: &mut [f64],
    w: &[f64],
    b: Option<&[f64]>,
    x: &[f64],
    rows: usize,
    out_dim: usize,
    in_dim: usize,
) {
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let yr = &mut y[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = match b {
                Some(b) => b[o],
                None => 0.0,
            };
            for i in 0..in_dim {
                acc += wr[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
}

fn linear_bwd(
    gw: &mut [f64],
    mut gb: Option<&mut [f64]>,
    mut gx: Option<&mut [f64]>,
    gy: &[f64],
    w: &[f64],
    x: &[f64],
    rows: usize,
    out_dim: usize,
    in_dim: usize,
) {
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let gyr = &gy[r * out_dim..(r + 1) * out_dim];
        for o in 0..out_dim {
            let g = gyr[o];
            if g == 0.0 {
                continue;
            }
            let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                gwr[i] += g * xr[i];
            }
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += g;
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gxr = &mut gx[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let g = gyr[o];
                if g == 0.0 {
                    continue;
                }
                let wr = &w[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    gxr[i] += g * wr[i];
                }
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct NormTrace {
    mean: Vec<f64>,
    rstd: Vec<f64>,
    out: Vec<f64>,
}

fn layernorm_fwd(x: &[f64], gamma: &[f64], beta: &[f64], rows: usize, d: usize) -> NormTrace {
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mu: f64 = xr.iter().sum::<f64>() / d as f64;
        let var: f64 = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let yr = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            yr[i] = (xr[i] - mu) * rs * gamma[i] + beta[i];
        }
    }
    NormTrace { mean, rstd, out }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_bwd(
    gout: &[f64],
    x: &[f64],
    trace: &NormTrace,
    gamma: &[f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
    gx: &mut [f64],
    rows: usize,
    d: usize,
) {
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let gr = &gout[r * d..(r + 1) * d];
        let mu = trace.mean[r];
        let rs = trace.rstd[r];
        let mut mean_gxhat = 0.0;
        let mut mean_gxhat_xhat = 0.0;
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            let gxhat = gr[i] * gamma[i];
            ggamma[i] += gr[i] * xhat;
            gbeta[i] += gr[i];
            mean_gxhat += gxhat;
            mean_gxhat_xhat += gxhat * xhat;
        }
        mean_gxhat /= d as f64;
        mean_gxhat_xhat /= d as f64;
        let gxr = &mut gx[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (xr[i] - mu) * rs;
            let gxhat = gr[i] * gamma[i];
            gxr[i] += rs * (gxhat - mean_gxhat - xhat * mean_gxhat_xhat);
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// In-place stabilized softmax over a slice.
fn softmax(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

// ---------------------------------------------------------------------------
// View descriptors, weights, instruction embedding
// ---------------------------------------------------------------------------

/// Descriptor of one view: mask area s, border-pixel ratio a (margin
/// ceil(0.05 min(H,W))), mean masked confidence c.
pub fn view_descriptor(
    mask_view: &[u8],
    conf_view: &[f64],
    height: usize,
    width: usize,
) -> ViewDescriptor {
    let total = height * width;
    debug_assert_eq!(mask_view.len(), total);
    debug_assert_eq!(conf_view.len(), total);
    let b = (0.05 * height.min(width) as f64).ceil() as usize;
    let mut count = 0usize;
    let mut border = 0usize;
    let mut conf = 0.0;
    for h in 0..height {
        for w in 0..width {
            if mask_view[h * width + w] == 1 {
                count += 1;
                conf += conf_view[h * width + w];
                if h < b || h >= height - b || w < b || w >= width - b {
                    border += 1;
                }
            }
        }
    }
    ViewDescriptor {
        area: count as f64 / total as f64,
        boundary: border as f64 / 1.0_f64.max(count as f64),
        confidence: if count == 0 { 0.0 } else { conf / count as f64 },
    }
}

#[derive(Debug, Clone)]
struct ViewWeightTrace {
    hidden: Vec<f64>, // N * VIEW_HIDDEN, tanh activations
    #[allow(dead_code)]
    logits: Vec<f64>, // N
    weights: Vec<f64>,
}

fn view_weights_fwd(
    descriptors: &[ViewDescriptor],
    params: &ModelParams,
    learned: bool,
) -> ViewWeightTrace {
    let n = descriptors.len();
    if !learned {
        return ViewWeightTrace {
            hidden: vec![0.0; n * VIEW_HIDDEN],
            logits: vec![0.0; n],
            weights: vec![1.0 / n as f64; n],
        };
    }
    let mut hidden = vec![0.0; n * VIEW_HIDDEN];
    let mut logits = vec![0.0; n];
    for (i, g) in descriptors.iter().enumerate() {
        let input = [g.area, g.boundary, g.confidence];
        let h = &mut hidden[i * VIEW_HIDDEN..(i + 1) * VIEW_HIDDEN];
        for o in 0..VIEW_HIDDEN {
            let mut acc = params.view_b1[o];
            for (j, x) in input.iter().enumerate() {
                acc += params.view_w1[o * 3 + j] * x;
            }
            h[o] = acc.tanh();
        }
        let mut logit = params.view_b2[0];
        for o in 0..VIEW_HIDDEN {
            logit += params.view_w2[o] * h[o];
        }
        logits[i] = logit;
    }
    let mut weights = logits.clone();
    softmax(&mut weights);
    ViewWeightTrace {
        hidden,
        logits,
        weights,
    }
}

/// Softmax-normalized importance weights over per-view descriptors.
pub fn view_weights(descriptors: &[ViewDescriptor], params: &ModelParams) -> Vec<f64> {
    view_weights_fwd(descriptors, params, true).weights
}

/// Table lookup (optionally mean-pooled to a single token).
pub fn embed_instruction(
    ids: &[u16],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<InstructionEmbedding> {
    if ids.is_empty() {
        return Err(Error::Domain("instruction needs at least one token".into()));
    }
    let d = cfg.model_dim;
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Domain(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    if cfg.pooled_text {
        let mut pooled = vec![0.0; d];
        for &id in ids {
            let row = &params.embed[id as usize * d..(id as usize + 1) * d];
            for i in 0..d {
                pooled[i] += row[i];
            }
        }
        let inv = 1.0 / ids.len() as f64;
        pooled.iter_mut().for_each(|v| *v *= inv);
        Ok(InstructionEmbedding {
            tokens: pooled,
            len: 1,
            ids: ids.to_vec(),
        })
    } else {
        let mut tokens = vec![0.0; ids.len() * d];
        for (j, &id) in ids.iter().enumerate() {
            tokens[j * d..(j + 1) * d]
                .copy_from_slice(&params.embed[id as usize * d..(id as usize + 1) * d]);
        }
        Ok(InstructionEmbedding {
            tokens,
            len: ids.len(),
            ids: ids.to_vec(),
        })
    }
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

/// Patch + pose tokenization. Returns (tokens TTxd, patch inputs TTxI, pose
/// inputs Nx12); token (n, ph, pw) flattens as n*PHW + ph*PW + pw.
pub fn encode_views(
    base: &PointMap,
    mask: &EditMask,
    confidence: &[f64],
    cams: &[CameraView],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let p = cfg.token_patch;
    let d = cfg.model_dim;
    if !base.height.is_multiple_of(p) || !base.width.is_multiple_of(p) {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by patch size {p}",
            base.height, base.width
        )));
    }
    if !mask.same_shape(base) || confidence.len() != base.pixels() || cams.len() != base.views {
        return Err(Error::Shape("encode_views operand shapes differ".into()));
    }
    let (ph_count, pw_count) = (base.height / p, base.width / p);
    let tokens_per_view = ph_count * pw_count;
    let total = base.views * tokens_per_view;
    let in_dim = cfg.patch_input_dim();

    let mut patch_inputs = vec![0.0; total * in_dim];
    for n in 0..base.views {
        for ph in 0..ph_count {
            for pw in 0..pw_count {
                let t = n * tokens_per_view + ph * pw_count + pw;
                let input = &mut patch_inputs[t * in_dim..(t + 1) * in_dim];
                let mut k = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        let (h, w) = (ph * p + dy, pw * p + dx);
                        let i = base.idx(n, h, w);
                        input[k] = base.values()[i];
                        input[k + 1] = base.values()[i + 1];
                        input[k + 2] = base.values()[i + 2];
                        k += 3;
                    }
                }
                for dy in 0..p {
                    for dx in 0..p {
                        input[k] = f64::from(mask.get(n, ph * p + dy, pw * p + dx));
                        k += 1;
                    }
                }
                for dy in 0..p {
                    for dx in 0..p {
                        let (h, w) = (ph * p + dy, pw * p + dx);
                        input[k] = confidence[(n * base.height + h) * base.width + w];
                        k += 1;
                    }
                }
            }
        }
    }

    let mut pose_inputs = vec![0.0; base.views * 12];
    for (n, cam) in cams.iter().enumerate() {
        let pose = &mut pose_inputs[n * 12..(n + 1) * 12];
        let mut k = 0;
        for r in 0..3 {
            for c in 0..3 {
                pose[k] = cam.rotation[(r, c)];
                k += 1;
            }
        }
        pose[9] = cam.translation.x;
        pose[10] = cam.translation.y;
        pose[11] = cam.translation.z;
    }

    let mut tokens = vec![0.0; total * d];
    linear_fwd(
        &mut tokens,
        &params.patch_w,
        Some(&params.patch_b),
        &patch_inputs,
        total,
        d,
        in_dim,
    );
    let mut pose_embed = vec![0.0; base.views * d];
    linear_fwd(
        &mut pose_embed,
        &params.pose_w,
        None,
        &pose_inputs,
        base.views,
        d,
        12,
    );
    for n in 0..base.views {
        let pe = &pose_embed[n * d..(n + 1) * d];
        for t in 0..tokens_per_view {
            let row = &mut tokens[(n * tokens_per_view + t) * d..(n * tokens_per_view + t + 1) * d];
            for i in 0..d {
                row[i] += pe[i];
            }
        }
    }
    Ok((tokens, patch_inputs, pose_inputs))
}

// ---------------------------------------------------------------------------
// Attention blocks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct CrossTrace {
    slot: usize,
    x_in: Vec<f64>,
    ke: Vec<f64>,
    ve: Vec<f64>,
    /// ((n*heads + hd)*tokens_per_view + ti)*T + j
    probs: Vec<f64>,
    att: Vec<f64>,
}

/// Queries are the raw token states; keys/values are the projected text
/// tokens gated by sqrt(w_n); the attended values pass through the slot's
/// output projection and add residually.
#[allow(clippy::too_many_arguments)]
fn cross_attention_fwd(
    x: &mut [f64],
    e: &InstructionEmbedding,
    weights: &[f64],
    inj: &InjectParams,
    cfg: &ModelConfig,
    n_views: usize,
    tokens_per_view: usize,
    slot: usize,
) -> CrossTrace {
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let t_len = e.len;
    let scale_logits = 1.0 / (dh as f64).sqrt();
    let x_in = x.to_vec();

    let mut ke = vec![0.0; t_len * d];
    let mut ve = vec![0.0; t_len * d];
    linear_fwd(&mut ke, &inj.wk, None, &e.tokens, t_len, d, d);
    linear_fwd(&mut ve, &inj.wv, None, &e.tokens, t_len, d, d);

    let mut probs = vec![0.0; n_views * heads * tokens_per_view * t_len];
    let mut att = vec![0.0; x.len()];
    for n in 0..n_views {
        let gate = weights[n].sqrt();
        for hd in 0..heads {
            let off = hd * dh;
            for ti in 0..tokens_per_view {
                let t = n * tokens_per_view + ti;
                let q = &x_in[t * d + off..t * d + off + dh];
                let prow_start = ((n * heads + hd) * tokens_per_view + ti) * t_len;
                let prow = &mut probs[prow_start..prow_start + t_len];
                for j in 0..t_len {
                    let k = &ke[j * d + off..j * d + off + dh];
                    let mut dot = 0.0;
                    for i in 0..dh {
                        dot += q[i] * k[i];
                    }
                    prow[j] = gate * dot * scale_logits;
                }
                softmax(prow);
                let out = &mut att[t * d + off..t * d + off + dh];
                for j in 0..t_len {
                    let v = &ve[j * d + off..j * d + off + dh];
                    let pj = prow[j] * gate;
                    for i in 0..dh {
                        out[i] += pj * v[i];
                    }
                }
            }
        }
    }
    let total = n_views * tokens_per_view;
    let mut out = vec![0.0; total * d];
    linear_fwd(&mut out, &inj.wo, None, &att, total, d, d);
    for i in 0..x.len() {
        x[i] += out[i];
    }
    CrossTrace {
        slot,
        x_in,
        ke,
        ve,
        probs,
        att,
    }
}

/// Standalone text cross-attention over a token state (layer must be in the
/// injection schedule); returns the updated state.
pub fn text_cross_attention(
    tokens: &[f64],
    e: &InstructionEmbedding,
    weights: &[f64],
    params: &ModelParams,
    cfg: &ModelConfig,
    layer: usize,
) -> Result<Vec<f64>> {
    let schedule = cfg.schedule();
    let slot = schedule.iter().position(|&l| l == layer).ok_or_else(|| {
        Error::Domain(format!(
            "layer {layer} not in injection schedule {schedule:?}"
        ))
    })?;
    if weights.is_empty() || !tokens.len().is_multiple_of(cfg.model_dim) {
        return Err(Error::Shape(
            "text_cross_attention operand shapes differ".into(),
        ));
    }
    let total = tokens.len() / cfg.model_dim;
    if !total.is_multiple_of(weights.len()) {
        return Err(Error::Shape(format!(
            "{total} tokens not divisible by {} views",
            weights.len()
        )));
    }
    let n_views = weights.len();
    let tokens_per_view = total / n_views;
    let mut x = tokens.to_vec();
    cross_attention_fwd(
        &mut x,
        e,
        weights,
        &params.inject[slot],
        cfg,
        n_views,
        tokens_per_view,
        slot,
    );
    Ok(x)
}

#[derive(Debug, Clone)]
struct AttnTrace {
    ln: NormTrace,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// (hd*TT + t)*TT + s
    probs: Vec<f64>,
    att: Vec<f64>,
}

fn self_attention_fwd(
    x: &mut [f64],
    layer: &super::params::LayerParams,
    cfg: &ModelConfig,
    total: usize,
) -> AttnTrace {
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let ln = layernorm_fwd(x, &layer.ln1_gamma, &layer.ln1_beta, total, d);
    let mut q = vec![0.0; total * d];
    let mut k = vec![0.0; total * d];
    let mut v = vec![0.0; total * d];
    linear_fwd(&mut q, &layer.wq, None, &ln.out, total, d, d);
    linear_fwd(&mut k, &layer.wk, None, &ln.out, total, d, d);
    linear_fwd(&mut v, &layer.wv, None, &ln.out, total, d, d);

    let mut probs = vec![0.0; heads * total * total];
    let mut att = vec![0.0; total * d];
    for hd in 0..heads {
        let off = hd * dh;
        for t in 0..total {
            let qr = &q[t * d + off..t * d + off + dh];
            let prow_start = (hd * total + t) * total;
            for s in 0..total {
                let kr = &k[s * d + off..s * d + off + dh];
                let mut dot = 0.0;
                for i in 0..dh {
                    dot += qr[i] * kr[i];
                }
                probs[prow_start + s] = dot * scale;
            }
            softmax(&mut probs[prow_start..prow_start + total]);
            let out = &mut att[t * d + off..t * d + off + dh];
            for s in 0..total {
                let p = probs[prow_start + s];
                let vr = &v[s * d + off..s * d + off + dh];
                for i in 0..dh {
                    out[i] += p * vr[i];
                }
            }
        }
    }
    let mut out = vec![0.0; total * d];
    linear_fwd(&mut out, &layer.wo, None, &att, total, d, d);
    for i in 0..x.len() {
        x[i] += out[i];
    }
    AttnTrace {
        ln,
        q,
        k,
        v,
        probs,
        att,
    }
}

#[derive(Debug, Clone)]
struct MlpTrace {
    ln: NormTrace,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn mlp_fwd(
    x: &mut [f64],
    layer: &super::params::LayerParams,
    cfg: &ModelConfig,
    total: usize,
) -> MlpTrace {
    let d = cfg.model_dim;
    let hidden = cfg.mlp_hidden();
    let ln = layernorm_fwd(x, &layer.ln2_gamma, &layer.ln2_beta, total, d);
    let mut pre = vec![0.0; total * hidden];
    linear_fwd(
        &mut pre,
        &layer.mlp_w1,
        Some(&layer.mlp_b1),
        &ln.out,
        total,
        hidden,
        d,
    );
    let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
    let mut out = vec![0.0; total * d];
    linear_fwd(
        &mut out,
        &layer.mlp_w2,
        Some(&layer.mlp_b2),
        &act,
        total,
        d,
        hidden,
    );
    for i in 0..x.len() {
        x[i] += out[i];
    }
    MlpTrace { ln, pre, act }
}

#[derive(Debug, Clone)]
struct LayerTrace {
    cross: Option<CrossTrace>,
    x_sa_in: Vec<f64>,
    attn: AttnTrace,
    x_mlp_in: Vec<f64>,
    mlp: MlpTrace,
}

/// Full forward activation record for one sample.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub n_views: usize,
    pub tokens_per_view: usize,
    pub total_tokens: usize,
    patch_inputs: Vec<f64>,
    pose_inputs: Vec<f64>,
    pub embedding: InstructionEmbedding,
    pub descriptors: Vec<ViewDescriptor>,
    view_trace: ViewWeightTrace,
    layers: Vec<LayerTrace>,
    x_final: Vec<f64>,
    /// Raw head output scattered to the pixel grid (N*H*W*3).
    pub head_raw: Vec<f64>,
    /// Effective residual field: head output, or head output minus base when
    /// the head predicts absolute geometry.
    pub delta: ResidualField,
    pub injections_executed: usize,
}

impl ForwardTrace {
    pub fn view_weight_values(&self) -> &[f64] {
        &self.view_trace.weights
    }
}

/// Layers (1-indexed) that inject text under the current ablation flags.
fn injection_layers(cfg: &ModelConfig) -> Vec<usize> {
    if cfg.sync_attn {
        cfg.schedule()
    } else {
        vec![1]
    }
}

/// Run the full model on one sample.
pub fn forward(
    inputs: &ModelInputs,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<ForwardTrace> {
    cfg.validate()?;
    let base = inputs.base;
    let d = cfg.model_dim;
    let (x0, patch_inputs, pose_inputs) = encode_views(
        base,
        inputs.mask,
        inputs.confidence,
        inputs.cams,
        params,
        cfg,
    )?;
    let tokens_per_view = (base.height / cfg.token_patch) * (base.width / cfg.token_patch);
    let total = base.views * tokens_per_view;

    let embedding = embed_instruction(inputs.tokens, params, cfg)?;
    let mut descriptors = Vec::with_capacity(base.views);
    for n in 0..base.views {
        let stride = base.height * base.width;
        descriptors.push(view_descriptor(
            inputs.mask.view(n),
            &inputs.confidence[n * stride..(n + 1) * stride],
            base.height,
            base.width,
        ));
    }
    let view_trace = view_weights_fwd(&descriptors, params, cfg.view_weighting);

    let inject_at = injection_layers(cfg);
    let mut x = x0;
    let mut layers = Vec::with_capacity(cfg.depth);
    let mut injections_executed = 0;
    for l in 1..=cfg.depth {
        let cross = match inject_at.iter().position(|&il| il == l) {
            Some(slot_pos) => {
                // With sync off, the single injection reuses slot 0.
                let slot = if cfg.sync_attn { slot_pos } else { 0 };
                injections_executed += 1;
                Some(cross_attention_fwd(
                    &mut x,
                    &embedding,
                    &view_trace.weights,
                    &params.inject[slot],
                    cfg,
                    base.views,
                    tokens_per_view,
                    slot,
                ))
            }
            None => None,
        };
        let x_sa_in = x.clone();
        let attn = self_attention_fwd(&mut x, &params.layers[l - 1], cfg, total);
        let x_mlp_in = x.clone();
        let mlp = mlp_fwd(&mut x, &params.layers[l - 1], cfg, total);
        layers.push(LayerTrace {
            cross,
            x_sa_in,
            attn,
            x_mlp_in,
            mlp,
        });
    }
    let x_final = x;

    // Head: per-token linear map to a p x p x 3 displacement patch.
    let p = cfg.token_patch;
    let head_out_dim = 3 * p * p;
    let mut head_tokens = vec![0.0; total * head_out_dim];
    linear_fwd(
        &mut head_tokens,
        &params.head_w,
        Some(&params.head_b),
        &x_final,
        total,
        head_out_dim,
        d,
    );
    let mut head_raw = vec![0.0; base.pixels() * 3];
    let pw_count = base.width / p;
    for n in 0..base.views {
        for ti in 0..tokens_per_view {
            let (ph, pw) = (ti / pw_count, ti % pw_count);
            let tok = &head_tokens[(n * tokens_per_view + ti) * head_out_dim
                ..(n * tokens_per_view + ti + 1) * head_out_dim];
            for dy in 0..p {
                for dx in 0..p {
                    let i = base.idx(n, ph * p + dy, pw * p + dx);
                    let j = (dy * p + dx) * 3;
                    head_raw[i] = tok[j];
                    head_raw[i + 1] = tok[j + 1];
                    head_raw[i + 2] = tok[j + 2];
                }
            }
        }
    }
    let delta_values = if cfg.residual_head {
        head_raw.clone()
    } else {
        head_raw
            .iter()
            .zip(base.values())
            .map(|(h, b)| h - b)
            .collect()
    };
    let delta = ResidualField::new(base.views, base.height, base.width, delta_values)?;

    Ok(ForwardTrace {
        n_views: base.views,
        tokens_per_view,
        total_tokens: total,
        patch_inputs,
        pose_inputs,
        embedding,
        descriptors,
        view_trace,
        layers,
        x_final,
        head_raw,
        delta,
        injections_executed,
    })
}

/// Predicted edited geometry for inference: masked residual application, or
/// the raw head output when the head predicts absolute geometry.
pub fn predicted_edit(
    inputs: &ModelInputs,
    trace: &ForwardTrace,
    cfg: &ModelConfig,
) -> Result<PointMap> {
    if cfg.residual_head {
        crate::edit::apply_residual(inputs.base, &trace.delta, inputs.mask, true)
    } else {
        PointMap::new(
            inputs.base.views,
            inputs.base.height,
            inputs.base.width,
            inputs.base.frame,
            trace.head_raw.clone(),
        )
    }
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn cross_attention_bwd(
    gx_out: &[f64],
    trace: &CrossTrace,
    e: &InstructionEmbedding,
    weights: &[f64],
    inj: &InjectParams,
    g_inj: &mut InjectParams,
    cfg: &ModelConfig,
    n_views: usize,
    tokens_per_view: usize,
    g_x_in: &mut [f64],
    g_e: &mut [f64],
    g_gate: &mut [f64],
) {
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let t_len = e.len;
    let total = n_views * tokens_per_view;
    let scale_logits = 1.0 / (dh as f64).sqrt();

    // Residual passthrough.
    for i in 0..gx_out.len() {
        g_x_in[i] += gx_out[i];
    }
    // out = att * Wo^T
    let mut g_att = vec![0.0; total * d];
    linear_bwd(
        &mut g_inj.wo,
        None,
        Some(&mut g_att),
        gx_out,
        &inj.wo,
        &trace.att,
        total,
        d,
        d,
    );

    let mut g_ke = vec![0.0; t_len * d];
    let mut g_ve = vec![0.0; t_len * d];
    let mut g_probs = vec![0.0; t_len];
    let mut g_logits = vec![0.0; t_len];
    for n in 0..n_views {
        let gate = weights[n].sqrt();
        for hd in 0..heads {
            let off = hd * dh;
            for ti in 0..tokens_per_view {
                let t = n * tokens_per_view + ti;
                let ga = &g_att[t * d + off..t * d + off + dh];
                let prow_start = ((n * heads + hd) * tokens_per_view + ti) * t_len;
                let prow = &trace.probs[prow_start..prow_start + t_len];
                // att_h[t] = sum_j probs[j] * gate * ve_h[j]
                for j in 0..t_len {
                    let vr = &trace.ve[j * d + off..j * d + off + dh];
                    let gv = &mut g_ve[j * d + off..j * d + off + dh];
                    let mut dot_ga_v = 0.0;
                    for i in 0..dh {
                        dot_ga_v += ga[i] * vr[i];
                        gv[i] += prow[j] * gate * ga[i];
                    }
                    g_probs[j] = gate * dot_ga_v;
                    g_gate[n] += prow[j] * dot_ga_v;
                }
                // softmax backward
                let mut dot = 0.0;
                for j in 0..t_len {
                    dot += prow[j] * g_probs[j];
                }
                for j in 0..t_len {
                    g_logits[j] = prow[j] * (g_probs[j] - dot);
                }
                // logits[j] = gate * (q . ke_h[j]) / sqrt(dh)
                let q = &trace.x_in[t * d + off..t * d + off + dh];
                let gq = &mut g_x_in[t * d + off..t * d + off + dh];
                for j in 0..t_len {
                    let gl = g_logits[j];
                    if gl == 0.0 {
                        continue;
                    }
                    let kr = &trace.ke[j * d + off..j * d + off + dh];
                    let gk = &mut g_ke[j * d + off..j * d + off + dh];
                    let coef = gl * gate * scale_logits;
                    let mut dot_qk = 0.0;
                    for i in 0..dh {
                        gq[i] += coef * kr[i];
                        gk[i] += coef * q[i];
                        dot_qk += q[i] * kr[i];
                    }
                    g_gate[n] += gl * dot_qk * scale_logits;
                }
            }
        }
    }
    // ke = E * Wk^T, ve = E * Wv^T
    linear_bwd(
        &mut g_inj.wk,
        None,
        Some(g_e),
        &g_ke,
        &inj.wk,
        &e.tokens,
        t_len,
        d,
        d,
    );
    linear_bwd(
        &mut g_inj.wv,
        None,
        Some(g_e),
        &g_ve,
        &inj.wv,
        &e.tokens,
        t_len,
        d,
        d,
    );
}

fn self_attention_bwd(
    gx_out: &[f64],
    trace: &AttnTrace,
    x_in: &[f64],
    layer: &super::params::LayerParams,
    g_layer: &mut super::params::LayerParams,
    cfg: &ModelConfig,
    total: usize,
    g_x_in: &mut [f64],
) {
    let d = cfg.model_dim;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    for i in 0..gx_out.len() {
        g_x_in[i] += gx_out[i];
    }
    let mut g_att = vec![0.0; total * d];
    linear_bwd(
        &mut g_layer.wo,
        None,
        Some(&mut g_att),
        gx_out,
        &layer.wo,
        &trace.att,
        total,
        d,
        d,
    );

    let mut g_q = vec![0.0; total * d];
    let mut g_k = vec![0.0; total * d];
    let mut g_v = vec![0.0; total * d];
    let mut g_probs = vec![0.0; total];
    let mut g_logits = vec![0.0; total];
    for hd in 0..heads {
        let off = hd * dh;
        for t in 0..total {
            let ga = &g_att[t * d + off..t * d + off + dh];
            let prow_start = (hd * total + t) * total;
            let prow = &trace.probs[prow_start..prow_start + total];
            for s in 0..total {
                let vr = &trace.v[s * d + off..s * d + off + dh];
                let gv = &mut g_v[s * d + off..s * d + off + dh];
                let mut dot_ga_v = 0.0;
                for i in 0..dh {
                    dot_ga_v += ga[i] * vr[i];
                    gv[i] += prow[s] * ga[i];
                }
                g_probs[s] = dot_ga_v;
            }
            let mut dot = 0.0;
            for s in 0..total {
                dot += prow[s] * g_probs[s];
            }
            for s in 0..total {
                g_logits[s] = prow[s] * (g_probs[s] - dot);
            }
            let qr = &trace.q[t * d + off..t * d + off + dh];
            let gq = &mut g_q[t * d + off..t * d + off + dh];
            for s in 0..total {
                let gl = g_logits[s] * scale;
                if gl == 0.0 {
                    continue;
                }
                let kr = &trace.k[s * d + off..s * d + off + dh];
                let gk = &mut g_k[s * d + off..s * d + off + dh];
                for i in 0..dh {
                    gq[i] += gl * kr[i];
                    gk[i] += gl * qr[i];
                }
            }
        }
    }

    let mut g_ln_out = vec![0.0; total * d];
    linear_bwd(
        &mut g_layer.wq,
        None,
        Some(&mut g_ln_out),
        &g_q,
        &layer.wq,
        &trace.ln.out,
        total,
        d,
        d,
    );
    linear_bwd(
        &mut g_layer.wk,
        None,
        Some(&mut g_ln_out),
        &g_k,
        &layer.wk,
        &trace.ln.out,
        total,
        d,
        d,
    );
    linear_bwd(
        &mut g_layer.wv,
        None,
        Some(&mut g_ln_out),
        &g_v,
        &layer.wv,
        &trace.ln.out,
        total,
        d,
        d,
    );
    layernorm_bwd(
        &g_ln_out,
        x_in,
        &trace.ln,
        &layer.ln1_gamma,
        &mut g_layer.ln1_gamma,
        &mut g_layer.ln1_beta,
        g_x_in,
        total,
        d,
    );
}

fn mlp_bwd(
    gx_out: &[f64],
    trace: &MlpTrace,
    x_in: &[f64],
    layer: &super::params::LayerParams,
    g_layer: &mut super::params::LayerParams,
    cfg: &ModelConfig,
    total: usize,
    g_x_in: &mut [f64],
) {
    let d = cfg.model_dim;
    let hidden = cfg.mlp_hidden();
    for i in 0..gx_out.len() {
        g_x_in[i] += gx_out[i];
    }
    let mut g_act = vec![0.0; total * hidden];
    linear_bwd(
        &mut g_layer.mlp_w2,
        Some(&mut g_layer.mlp_b2),
        Some(&mut g_act),
        gx_out,
        &layer.mlp_w2,
        &trace.act,
        total,
        d,
        hidden,
    );
    let mut g_pre = vec![0.0; total * hidden];
    for i in 0..g_pre.len() {
        g_pre[i] = g_act[i] * gelu_grad(trace.pre[i]);
    }
    let mut g_ln_out = vec![0.0; total * d];
    linear_bwd(
        &mut g_layer.mlp_w1,
        Some(&mut g_layer.mlp_b1),
        Some(&mut g_ln_out),
        &g_pre,
        &layer.mlp_w1,
        &trace.ln.out,
        total,
        hidden,
        d,
    );
    layernorm_bwd(
        &g_ln_out,
        x_in,
        &trace.ln,
        &layer.ln2_gamma,
        &mut g_layer.ln2_gamma,
        &mut g_layer.ln2_beta,
        g_x_in,
        total,
        d,
    );
}

/// Reverse pass: gradient of a scalar loss w.r.t. every parameter array,
/// given the loss gradient w.r.t. the effective residual field.
pub fn backward(
    inputs: &ModelInputs,
    params: &ModelParams,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    grad_delta: &ResidualField,
) -> Result<ModelParams> {
    let base = inputs.base;
    if !grad_delta.same_shape(base) {
        return Err(Error::Shape(
            "backward: gradient shape differs from base".into(),
        ));
    }
    let d = cfg.model_dim;
    let p = cfg.token_patch;
    let head_out_dim = 3 * p * p;
    let total = trace.total_tokens;
    let tokens_per_view = trace.tokens_per_view;
    let mut grads = ModelParams::zeros(cfg);

    // Head scatter is the identity map pixel-for-pixel (and the absolute-
    // geometry mode only shifts by the constant base), so the gradient
    // gathers straight back into per-token rows.
    let mut g_head_tokens = vec![0.0; total * head_out_dim];
    let pw_count = base.width / p;
    for n in 0..base.views {
        for ti in 0..tokens_per_view {
            let (ph, pw) = (ti / pw_count, ti % pw_count);
            let tok = &mut g_head_tokens[(n * tokens_per_view + ti) * head_out_dim
                ..(n * tokens_per_view + ti + 1) * head_out_dim];
            for dy in 0..p {
                for dx in 0..p {
                    let i = base.idx(n, ph * p + dy, pw * p + dx);
                    let j = (dy * p + dx) * 3;
                    tok[j] = grad_delta.values()[i];
                    tok[j + 1] = grad_delta.values()[i + 1];
                    tok[j + 2] = grad_delta.values()[i + 2];
                }
            }
        }
    }
    let mut g_x = vec![0.0; total * d];
    linear_bwd(
        &mut grads.head_w,
        Some(&mut grads.head_b),
        Some(&mut g_x),
        &g_head_tokens,
        &params.head_w,
        &trace.x_final,
        total,
        head_out_dim,
        d,
    );

    let mut g_e = vec![0.0; trace.embedding.len * d];
    let mut g_gate = vec![0.0; trace.n_views];
    for l in (1..=cfg.depth).rev() {
        let lt = &trace.layers[l - 1];
        let layer = &params.layers[l - 1];

        let mut g_mlp_in = vec![0.0; total * d];
        mlp_bwd(
            &g_x,
            &lt.mlp,
            &lt.x_mlp_in,
            layer,
            &mut grads.layers[l - 1],
            cfg,
            total,
            &mut g_mlp_in,
        );
        g_x = g_mlp_in;

        let mut g_sa_in = vec![0.0; total * d];
        self_attention_bwd(
            &g_x,
            &lt.attn,
            &lt.x_sa_in,
            layer,
            &mut grads.layers[l - 1],
            cfg,
            total,
            &mut g_sa_in,
        );
        g_x = g_sa_in;

        if let Some(cross) = &lt.cross {
            let mut g_cross_in = vec![0.0; total * d];
            let slot = cross.slot;
            cross_attention_bwd(
                &g_x,
                cross,
                &trace.embedding,
                &trace.view_trace.weights,
                &params.inject[slot],
                &mut grads.inject[slot],
                cfg,
                trace.n_views,
                tokens_per_view,
                &mut g_cross_in,
                &mut g_e,
                &mut g_gate,
            );
            g_x = g_cross_in;
        }
    }

    // Tokenization backward: x0 = patch embed + per-view pose embed.
    let in_dim = cfg.patch_input_dim();
    linear_bwd(
        &mut grads.patch_w,
        Some(&mut grads.patch_b),
        None,
        &g_x,
        &params.patch_w,
        &trace.patch_inputs,
        total,
        d,
        in_dim,
    );
    let mut g_pose_embed = vec![0.0; trace.n_views * d];
    for n in 0..trace.n_views {
        let gp = &mut g_pose_embed[n * d..(n + 1) * d];
        for ti in 0..tokens_per_view {
            let row = &g_x[(n * tokens_per_view + ti) * d..(n * tokens_per_view + ti + 1) * d];
            for i in 0..d {
                gp[i] += row[i];
            }
        }
    }
    linear_bwd(
        &mut grads.pose_w,
        None,
        None,
        &g_pose_embed,
        &params.pose_w,
        &trace.pose_inputs,
        trace.n_views,
        d,
        12,
    );

    // View-weight backward: gate_n = sqrt(w_n), then softmax and the MLP.
    if cfg.view_weighting {
        let n_views = trace.n_views;
        let weights = &trace.view_trace.weights;
        let mut g_w = vec![0.0; n_views];
        for n in 0..n_views {
            g_w[n] = g_gate[n] / (2.0 * weights[n].sqrt());
        }
        let mut dot = 0.0;
        for n in 0..n_views {
            dot += weights[n] * g_w[n];
        }
        for n in 0..n_views {
            let g_logit = weights[n] * (g_w[n] - dot);
            let hidden = &trace.view_trace.hidden[n * VIEW_HIDDEN..(n + 1) * VIEW_HIDDEN];
            let g = &trace.descriptors[n];
            let input = [g.area, g.boundary, g.confidence];
            grads.view_b2[0] += g_logit;
            for o in 0..VIEW_HIDDEN {
                grads.view_w2[o] += g_logit * hidden[o];
                let g_hidden = g_logit * params.view_w2[o];
                let g_pre = g_hidden * (1.0 - hidden[o] * hidden[o]);
                grads.view_b1[o] += g_pre;
                for (j, x) in input.iter().enumerate() {
                    grads.view_w1[o * 3 + j] += g_pre * x;
                }
            }
        }
    }

    // Embedding backward.
    let ids = &trace.embedding.ids;
    if cfg.pooled_text {
        let inv = 1.0 / ids.len() as f64;
        for &id in ids {
            let row = &mut grads.embed[id as usize * d..(id as usize + 1) * d];
            for i in 0..d {
                row[i] += g_e[i] * inv;
            }
        }
    } else {
        for (j, &id) in ids.iter().enumerate() {
            let row = &mut grads.embed[id as usize * d..(id as usize + 1) * d];
            for i in 0..d {
                row[i] += g_e[j * d + i];
            }
        }
    }

    Ok(grads)
}
