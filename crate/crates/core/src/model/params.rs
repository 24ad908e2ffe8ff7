//! Trainable parameter arrays, seeded initialization, and checkpoint I/O.
//!
//! All matrices are dense row-major `[out_dim * in_dim]`. The same structure
//! doubles as the gradient and Adam moment buffers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, VIEW_HIDDEN};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub mlp_w1: Vec<f64>,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: Vec<f64>,
    pub mlp_b2: Vec<f64>,
}

/// Text key/value/output projections for one injection slot.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectParams {
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_w: Vec<f64>,
    pub patch_b: Vec<f64>,
    pub pose_w: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub inject: Vec<InjectParams>,
    pub view_w1: Vec<f64>,
    pub view_b1: Vec<f64>,
    pub view_w2: Vec<f64>,
    pub view_b2: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    pub embed: Vec<f64>,
}

fn uniform_init(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

impl ModelParams {
    /// Seeded initialization: linear maps uniform in [-1/sqrt(fan_in),
    /// +1/sqrt(fan_in)], norms at identity, embedding table normal sigma 0.02.
    pub fn init(cfg: &ModelConfig, seed: u64) -> ModelParams {
        let d = cfg.model_dim;
        let in_dim = cfg.patch_input_dim();
        let hidden = cfg.mlp_hidden();
        let head_out = 3 * cfg.token_patch * cfg.token_patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let patch_w = uniform_init(&mut rng, d * in_dim, in_dim);
        let patch_b = uniform_init(&mut rng, d, in_dim);
        let pose_w = uniform_init(&mut rng, d * 12, 12);
        let layers = (0..cfg.depth)
            .map(|_| LayerParams {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                wq: uniform_init(&mut rng, d * d, d),
                wk: uniform_init(&mut rng, d * d, d),
                wv: uniform_init(&mut rng, d * d, d),
                wo: uniform_init(&mut rng, d * d, d),
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                mlp_w1: uniform_init(&mut rng, hidden * d, d),
                mlp_b1: uniform_init(&mut rng, hidden, d),
                mlp_w2: uniform_init(&mut rng, d * hidden, hidden),
                mlp_b2: uniform_init(&mut rng, d, hidden),
            })
            .collect();
        let inject = (0..cfg.injection_count)
            .map(|_| InjectParams {
                wk: uniform_init(&mut rng, d * d, d),
                wv: uniform_init(&mut rng, d * d, d),
                wo: uniform_init(&mut rng, d * d, d),
            })
            .collect();
        let view_w1 = uniform_init(&mut rng, VIEW_HIDDEN * 3, 3);
        let view_b1 = uniform_init(&mut rng, VIEW_HIDDEN, 3);
        let view_w2 = uniform_init(&mut rng, VIEW_HIDDEN, VIEW_HIDDEN);
        let view_b2 = uniform_init(&mut rng, 1, VIEW_HIDDEN);
        let head_w = uniform_init(&mut rng, head_out * d, d);
        let head_b = uniform_init(&mut rng, head_out, d);
        let normal = Normal::new(0.0, 0.02).expect("fixed sigma");
        let embed = (0..cfg.vocab_size * d)
            .map(|_| normal.sample(&mut rng))
            .collect();

        ModelParams {
            patch_w,
            patch_b,
            pose_w,
            layers,
            inject,
            view_w1,
            view_b1,
            view_w2,
            view_b2,
            head_w,
            head_b,
            embed,
        }
    }

    /// Same shapes, all zeros — gradient and moment buffers.
    pub fn zeros(cfg: &ModelConfig) -> ModelParams {
        let d = cfg.model_dim;
        let in_dim = cfg.patch_input_dim();
        let hidden = cfg.mlp_hidden();
        let head_out = 3 * cfg.token_patch * cfg.token_patch;
        ModelParams {
            patch_w: vec![0.0; d * in_dim],
            patch_b: vec![0.0; d],
            pose_w: vec![0.0; d * 12],
            layers: (0..cfg.depth)
                .map(|_| LayerParams {
                    ln1_gamma: vec![0.0; d],
                    ln1_beta: vec![0.0; d],
                    wq: vec![0.0; d * d],
                    wk: vec![0.0; d * d],
                    wv: vec![0.0; d * d],
                    wo: vec![0.0; d * d],
                    ln2_gamma: vec![0.0; d],
                    ln2_beta: vec![0.0; d],
                    mlp_w1: vec![0.0; hidden * d],
                    mlp_b1: vec![0.0; hidden],
                    mlp_w2: vec![0.0; d * hidden],
                    mlp_b2: vec![0.0; d],
                })
                .collect(),
            inject: (0..cfg.injection_count)
                .map(|_| InjectParams {
                    wk: vec![0.0; d * d],
                    wv: vec![0.0; d * d],
                    wo: vec![0.0; d * d],
                })
                .collect(),
            view_w1: vec![0.0; VIEW_HIDDEN * 3],
            view_b1: vec![0.0; VIEW_HIDDEN],
            view_w2: vec![0.0; VIEW_HIDDEN],
            view_b2: vec![0.0; 1],
            head_w: vec![0.0; head_out * d],
            head_b: vec![0.0; head_out],
            embed: vec![0.0; cfg.vocab_size * d],
        }
    }

    /// Canonical (name, dims) listing; order is the serialization order.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<u32>)> {
        let d = cfg.model_dim as u32;
        let in_dim = cfg.patch_input_dim() as u32;
        let hidden = cfg.mlp_hidden() as u32;
        let head_out = (3 * cfg.token_patch * cfg.token_patch) as u32;
        let vh = VIEW_HIDDEN as u32;
        let mut shapes = vec![
            ("patch.weight".to_string(), vec![d, in_dim]),
            ("patch.bias".to_string(), vec![d]),
            ("pose.weight".to_string(), vec![d, 12]),
        ];
        for l in 0..cfg.depth {
            for (suffix, dims) in [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.wq", vec![d, d]),
                ("attn.wk", vec![d, d]),
                ("attn.wv", vec![d, d]),
                ("attn.wo", vec![d, d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("mlp.w1", vec![hidden, d]),
                ("mlp.b1", vec![hidden]),
                ("mlp.w2", vec![d, hidden]),
                ("mlp.b2", vec![d]),
            ] {
                shapes.push((format!("layer{l}.{suffix}"), dims));
            }
        }
        for j in 0..cfg.injection_count {
            for (suffix, dims) in [("wk", vec![d, d]), ("wv", vec![d, d]), ("wo", vec![d, d])] {
                shapes.push((format!("inject{j}.{suffix}"), dims));
            }
        }
        shapes.push(("viewmlp.w1".to_string(), vec![vh, 3]));
        shapes.push(("viewmlp.b1".to_string(), vec![vh]));
        shapes.push(("viewmlp.w2".to_string(), vec![1, vh]));
        shapes.push(("viewmlp.b2".to_string(), vec![1]));
        shapes.push(("head.weight".to_string(), vec![head_out, d]));
        shapes.push(("head.bias".to_string(), vec![head_out]));
        shapes.push(("embed.table".to_string(), vec![cfg.vocab_size as u32, d]));
        shapes
    }

    /// Arrays in the canonical order of [`ModelParams::shapes`].
    pub fn arrays(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("patch.weight".to_string(), &self.patch_w),
            ("patch.bias".to_string(), &self.patch_b),
            ("pose.weight".to_string(), &self.pose_w),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1.gamma"), &layer.ln1_gamma));
            out.push((format!("layer{l}.ln1.beta"), &layer.ln1_beta));
            out.push((format!("layer{l}.attn.wq"), &layer.wq));
            out.push((format!("layer{l}.attn.wk"), &layer.wk));
            out.push((format!("layer{l}.attn.wv"), &layer.wv));
            out.push((format!("layer{l}.attn.wo"), &layer.wo));
            out.push((format!("layer{l}.ln2.gamma"), &layer.ln2_gamma));
            out.push((format!("layer{l}.ln2.beta"), &layer.ln2_beta));
            out.push((format!("layer{l}.mlp.w1"), &layer.mlp_w1));
            out.push((format!("layer{l}.mlp.b1"), &layer.mlp_b1));
            out.push((format!("layer{l}.mlp.w2"), &layer.mlp_w2));
            out.push((format!("layer{l}.mlp.b2"), &layer.mlp_b2));
        }
        for (j, inj) in self.inject.iter().enumerate() {
            out.push((format!("inject{j}.wk"), &inj.wk));
            out.push((format!("inject{j}.wv"), &inj.wv));
            out.push((format!("inject{j}.wo"), &inj.wo));
        }
        out.push(("viewmlp.w1".to_string(), &self.view_w1));
        out.push(("viewmlp.b1".to_string(), &self.view_b1));
        out.push(("viewmlp.w2".to_string(), &self.view_w2));
        out.push(("viewmlp.b2".to_string(), &self.view_b2));
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out.push(("embed.table".to_string(), &self.embed));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("patch.weight".to_string(), &mut self.patch_w),
            ("patch.bias".to_string(), &mut self.patch_b),
            ("pose.weight".to_string(), &mut self.pose_w),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.ln1.gamma"), &mut layer.ln1_gamma));
            out.push((format!("layer{l}.ln1.beta"), &mut layer.ln1_beta));
            out.push((format!("layer{l}.attn.wq"), &mut layer.wq));
            out.push((format!("layer{l}.attn.wk"), &mut layer.wk));
            out.push((format!("layer{l}.attn.wv"), &mut layer.wv));
            out.push((format!("layer{l}.attn.wo"), &mut layer.wo));
            out.push((format!("layer{l}.ln2.gamma"), &mut layer.ln2_gamma));
            out.push((format!("layer{l}.ln2.beta"), &mut layer.ln2_beta));
            out.push((format!("layer{l}.mlp.w1"), &mut layer.mlp_w1));
            out.push((format!("layer{l}.mlp.b1"), &mut layer.mlp_b1));
            out.push((format!("layer{l}.mlp.w2"), &mut layer.mlp_w2));
            out.push((format!("layer{l}.mlp.b2"), &mut layer.mlp_b2));
        }
        for (j, inj) in self.inject.iter_mut().enumerate() {
            out.push((format!("inject{j}.wk"), &mut inj.wk));
            out.push((format!("inject{j}.wv"), &mut inj.wv));
            out.push((format!("inject{j}.wo"), &mut inj.wo));
        }
        out.push(("viewmlp.w1".to_string(), &mut self.view_w1));
        out.push(("viewmlp.b1".to_string(), &mut self.view_b1));
        out.push(("viewmlp.w2".to_string(), &mut self.view_w2));
        out.push(("viewmlp.b2".to_string(), &mut self.view_b2));
        out.push(("head.weight".to_string(), &mut self.head_w));
        out.push(("head.bias".to_string(), &mut self.head_b));
        out.push(("embed.table".to_string(), &mut self.embed));
        out
    }

    /// Allocation-free access by position in the canonical array order.
    pub fn array_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        match idx {
            0 => return &mut self.patch_w,
            1 => return &mut self.patch_b,
            2 => return &mut self.pose_w,
            _ => {}
        }
        let mut idx = idx - 3;
        const PER_LAYER: usize = 12;
        if idx < self.layers.len() * PER_LAYER {
            let layer = &mut self.layers[idx / PER_LAYER];
            return match idx % PER_LAYER {
                0 => &mut layer.ln1_gamma,
                1 => &mut layer.ln1_beta,
                2 => &mut layer.wq,
                3 => &mut layer.wk,
                4 => &mut layer.wv,
                5 => &mut layer.wo,
                6 => &mut layer.ln2_gamma,
                7 => &mut layer.ln2_beta,
                8 => &mut layer.mlp_w1,
                9 => &mut layer.mlp_b1,
                10 => &mut layer.mlp_w2,
                _ => &mut layer.mlp_b2,
            };
        }
        idx -= self.layers.len() * PER_LAYER;
        if idx < self.inject.len() * 3 {
            let inj = &mut self.inject[idx / 3];
            return match idx % 3 {
                0 => &mut inj.wk,
                1 => &mut inj.wv,
                _ => &mut inj.wo,
            };
        }
        idx -= self.inject.len() * 3;
        match idx {
            0 => &mut self.view_w1,
            1 => &mut self.view_b1,
            2 => &mut self.view_w2,
            3 => &mut self.view_b2,
            4 => &mut self.head_w,
            5 => &mut self.head_b,
            6 => &mut self.embed,
            _ => panic!("parameter array index {idx} out of range"),
        }
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }
}

const CONFIG_META: &str = "meta.config";

fn config_to_meta(cfg: &ModelConfig) -> Vec<f64> {
    vec![
        cfg.token_patch as f64,
        cfg.model_dim as f64,
        cfg.heads as f64,
        cfg.depth as f64,
        cfg.injection_stride as f64,
        cfg.injection_count as f64,
        cfg.vocab_size as f64,
        f64::from(cfg.sync_attn),
        f64::from(cfg.view_weighting),
        f64::from(cfg.residual_head),
        f64::from(cfg.pooled_text),
    ]
}

fn config_from_meta(meta: &[f64]) -> Result<ModelConfig> {
    if meta.len() != 11 {
        return Err(Error::Format(format!(
            "checkpoint config meta has {} entries, expected 11",
            meta.len()
        )));
    }
    let cfg = ModelConfig {
        token_patch: meta[0] as usize,
        model_dim: meta[1] as usize,
        heads: meta[2] as usize,
        depth: meta[3] as usize,
        injection_stride: meta[4] as usize,
        injection_count: meta[5] as usize,
        vocab_size: meta[6] as usize,
        sync_attn: meta[7] != 0.0,
        view_weighting: meta[8] != 0.0,
        residual_head: meta[9] != 0.0,
        pooled_text: meta[10] != 0.0,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Write the config meta array plus every parameter array.
pub fn save_checkpoint(
    path: impl AsRef<std::path::Path>,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<()> {
    let shapes = ModelParams::shapes(cfg);
    let mut arrays = vec![(CONFIG_META.to_string(), vec![11u32], config_to_meta(cfg))];
    for ((name, arr), (shape_name, dims)) in params.arrays().into_iter().zip(shapes) {
        debug_assert_eq!(name, shape_name);
        arrays.push((name, dims, arr.clone()));
    }
    io::write_named_arrays(path, &arrays)
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<(ModelParams, ModelConfig)> {
    let arrays = io::read_named_arrays(&path)?;
    let meta = arrays
        .iter()
        .find(|(name, _, _)| name == CONFIG_META)
        .ok_or_else(|| Error::Format("checkpoint missing config meta array".into()))?;
    let cfg = config_from_meta(&meta.2)?;
    let mut params = ModelParams::zeros(&cfg);
    let shapes = ModelParams::shapes(&cfg);
    for ((name, dims), (_, target)) in shapes.iter().zip(params.arrays_mut()) {
        let found = arrays
            .iter()
            .find(|(n, _, _)| n == name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing array {name}")))?;
        if &found.1 != dims {
            return Err(Error::Format(format!(
                "checkpoint array {name}: dims {:?}, expected {:?}",
                found.1, dims
            )));
        }
        target.copy_from_slice(&found.2);
    }
    Ok((params, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = ModelConfig::tiny();
        let a = ModelParams::init(&cfg, 7);
        let b = ModelParams::init(&cfg, 7);
        assert_eq!(a, b);
        assert!(a.all_finite());
        let c = ModelParams::init(&cfg, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_match_arrays() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 1);
        let shapes = ModelParams::shapes(&cfg);
        let arrays = p.arrays();
        assert_eq!(shapes.len(), arrays.len());
        for ((name, dims), (aname, arr)) in shapes.iter().zip(arrays.iter()) {
            assert_eq!(name, aname);
            let expect: usize = dims.iter().map(|&d| d as usize).product();
            assert_eq!(arr.len(), expect, "{name}");
        }
    }

    #[test]
    fn init_bounds_respected() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::init(&cfg, 3);
        let bound = 1.0 / (cfg.patch_input_dim() as f64).sqrt();
        assert!(p.patch_w.iter().all(|v| v.abs() <= bound));
        assert!(p.layers[0].ln1_gamma.iter().all(|&v| v == 1.0));
        assert!(p.layers[0].ln1_beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 42);
        let path = dir.path().join("m.dfck");
        save_checkpoint(&path, &params, &cfg).unwrap();
        let (back, cfg2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, params);
    }
}
