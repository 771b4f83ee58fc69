//! Vision Transformer encoder with iBOT-style projection heads.
//!
//! Parameters live in a name → matrix map (`ModelWeights::params`); vectors are
//! stored as `1×n` rows. The forward pass is built on an [`autograd::Tape`] so
//! training and inference share one code path.

use std::collections::BTreeMap;

use image::RgbImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::container::{self, Dtype};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    VitTinyDesk,
    VitBase,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub preset: Preset,
    pub image_size: u32,
    pub patch_size: u32,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the 3-layer projection MLP.
    pub head_hidden_dim: usize,
    /// Width of the L2-normalised bottleneck.
    pub head_bottleneck_dim: usize,
    /// Number of output bins of the weight-normalised last layer.
    pub head_out_dim: usize,
    /// CLS and patch tokens use the same projection head.
    pub shared_head: bool,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl ViTConfig {
    pub fn vit_tiny_desk() -> Self {
        Self {
            preset: Preset::VitTinyDesk,
            image_size: 256,
            patch_size: 16,
            depth: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 4,
            head_hidden_dim: 2048,
            head_bottleneck_dim: 256,
            head_out_dim: 8192,
            shared_head: true,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }

    pub fn vit_base() -> Self {
        Self {
            preset: Preset::VitBase,
            depth: 12,
            embed_dim: 768,
            heads: 12,
            ..Self::vit_tiny_desk()
        }
    }

    pub fn grid_side(&self) -> usize {
        (self.image_size / self.patch_size) as usize
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        (self.patch_size * self.patch_size * 3) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "patch_size {} must divide image_size {}",
                self.patch_size, self.image_size
            ));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad("depth, embed_dim, heads and mlp_ratio must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if self.head_hidden_dim == 0 || self.head_bottleneck_dim == 0 || self.head_out_dim == 0 {
            return bad("projection head dims must be positive".into());
        }
        if self.pixel_std.iter().any(|s| !(*s > 0.0)) {
            return bad("pixel_std must be positive".into());
        }
        Ok(())
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.") || name.starts_with("patch_head.")
}

/// Parameters that weight decay skips: biases, norms, tokens and embeddings.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight") && !name.contains("norm")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ViTConfig,
    pub params: BTreeMap<String, Array2<f64>>,
}

fn trunc_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

fn head_shapes(cfg: &ViTConfig, prefix: &str) -> Vec<(String, (usize, usize))> {
    let (d, h, b, k) = (
        cfg.embed_dim,
        cfg.head_hidden_dim,
        cfg.head_bottleneck_dim,
        cfg.head_out_dim,
    );
    vec![
        (format!("{prefix}.mlp.0.weight"), (d, h)),
        (format!("{prefix}.mlp.0.bias"), (1, h)),
        (format!("{prefix}.mlp.1.weight"), (h, h)),
        (format!("{prefix}.mlp.1.bias"), (1, h)),
        (format!("{prefix}.mlp.2.weight"), (h, b)),
        (format!("{prefix}.mlp.2.bias"), (1, b)),
        (format!("{prefix}.last_layer.weight"), (b, k)),
    ]
}

impl ModelWeights {
    /// Random initialisation: truncated normal (std 0.02) for linear layers,
    /// tokens and positions; fan-in uniform for the patch projection; zeros for
    /// biases and the mask token; unit LayerNorm gains.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let mut p = BTreeMap::new();
        let fan_in = config.patch_dim() as f64;
        let bound = 1.0 / fan_in.sqrt();
        p.insert("patch_embed.weight".into(), uniform(&mut rng, config.patch_dim(), d, bound));
        p.insert("patch_embed.bias".into(), uniform(&mut rng, 1, d, bound));
        p.insert("cls_token".into(), trunc_normal(&mut rng, 1, d, 0.02));
        p.insert("pos_embed".into(), trunc_normal(&mut rng, config.seq_len(), d, 0.02));
        p.insert("mask_token".into(), Array2::zeros((1, d)));
        for i in 0..config.depth {
            let pre = format!("blocks.{i}");
            p.insert(format!("{pre}.norm1.weight"), Array2::ones((1, d)));
            p.insert(format!("{pre}.norm1.bias"), Array2::zeros((1, d)));
            p.insert(format!("{pre}.attn.qkv.weight"), trunc_normal(&mut rng, d, 3 * d, 0.02));
            p.insert(format!("{pre}.attn.qkv.bias"), Array2::zeros((1, 3 * d)));
            p.insert(format!("{pre}.attn.proj.weight"), trunc_normal(&mut rng, d, d, 0.02));
            p.insert(format!("{pre}.attn.proj.bias"), Array2::zeros((1, d)));
            p.insert(format!("{pre}.norm2.weight"), Array2::ones((1, d)));
            p.insert(format!("{pre}.norm2.bias"), Array2::zeros((1, d)));
            p.insert(format!("{pre}.mlp.fc1.weight"), trunc_normal(&mut rng, d, hidden, 0.02));
            p.insert(format!("{pre}.mlp.fc1.bias"), Array2::zeros((1, hidden)));
            p.insert(format!("{pre}.mlp.fc2.weight"), trunc_normal(&mut rng, hidden, d, 0.02));
            p.insert(format!("{pre}.mlp.fc2.bias"), Array2::zeros((1, d)));
        }
        p.insert("norm.weight".into(), Array2::ones((1, d)));
        p.insert("norm.bias".into(), Array2::zeros((1, d)));
        let mut prefixes = vec!["head"];
        if !config.shared_head {
            prefixes.push("patch_head");
        }
        for prefix in prefixes {
            for (name, (r, c)) in head_shapes(config, prefix) {
                let t = if name.ends_with(".bias") {
                    Array2::zeros((r, c))
                } else {
                    trunc_normal(&mut rng, r, c, 0.02)
                };
                p.insert(name, t);
            }
        }
        Ok(Self {
            config: config.clone(),
            params: p,
        })
    }

    pub fn has_heads(&self) -> bool {
        self.params.keys().any(|k| is_head_param(k))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Copy without projection-head parameters.
    pub fn backbone_only(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .filter(|(k, _)| !is_head_param(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.params {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("weight {name}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, stem: &std::path::Path, dtype: Dtype) -> Result<()> {
        let meta = serde_json::json!({ "vit_config": self.config });
        container::write_weights(stem, "vit", &self.params, dtype, meta)?;
        Ok(())
    }

    pub fn load(stem: &std::path::Path) -> Result<Self> {
        let (manifest, params) = container::read_weights(stem)?;
        let config: ViTConfig = serde_json::from_value(manifest.metadata["vit_config"].clone())
            .map_err(|e| Error::json(stem, e))?;
        config.validate()?;
        Ok(Self { config, params })
    }
}

/// Converts an RGB image into normalised patch rows `[G² × P·P·3]`, row-major
/// over the grid, each row ordered (y, x, channel) within the patch.
pub fn patchify(image: &RgbImage, config: &ViTConfig) -> Result<Array2<f64>> {
    let (w, h) = image.dimensions();
    if w != config.image_size || h != config.image_size {
        return Err(Error::shape(format!(
            "input is {w}x{h}, model expects {0}x{0}",
            config.image_size
        )));
    }
    let g = config.grid_side();
    let ps = config.patch_size as usize;
    let raw = image.as_raw();
    let stride = w as usize * 3;
    let mut out = Array2::zeros((g * g, config.patch_dim()));
    for gr in 0..g {
        for gc in 0..g {
            let mut row = out.row_mut(gr * g + gc);
            let mut k = 0;
            for y in 0..ps {
                let base = (gr * ps + y) * stride + gc * ps * 3;
                for x in 0..ps {
                    for c in 0..3 {
                        let v = f64::from(raw[base + x * 3 + c]) / 255.0;
                        row[k] = (v - config.pixel_mean[c]) / config.pixel_std[c];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Tape handles for a parameter map.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Puts every parameter on the tape, trainable or constant.
    pub fn bind(tape: &mut Tape, params: &BTreeMap<String, Array2<f64>>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub struct EncoderVars {
    /// `1×D`
    pub cls: Var,
    /// `G²×D`
    pub patches: Var,
    /// Final block's attention probabilities, one `T×T` matrix per head.
    pub last_attention: Vec<Var>,
}

fn linear(tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str) -> Var {
    let y = tape.matmul(x, p.get(&format!("{prefix}.weight")));
    match p.try_get(&format!("{prefix}.bias")) {
        Some(b) => tape.add_row(y, b),
        None => y,
    }
}

fn layer_norm(tape: &mut Tape, p: &BoundParams, x: Var, prefix: &str) -> Var {
    let n = tape.layer_norm(x, LN_EPS);
    let n = tape.mul_row(n, p.get(&format!("{prefix}.weight")));
    tape.add_row(n, p.get(&format!("{prefix}.bias")))
}

/// Patch projection, optional mask-token substitution, CLS prepend and
/// positional embedding: the `[G²+1 × D]` token sequence.
pub fn embed_tokens(
    tape: &mut Tape,
    cfg: &ViTConfig,
    p: &BoundParams,
    pixels: &Array2<f64>,
    mask: Option<&[bool]>,
) -> Result<Var> {
    if pixels.dim() != (cfg.num_patches(), cfg.patch_dim()) {
        return Err(Error::shape(format!(
            "pixel rows {:?}, expected ({}, {})",
            pixels.dim(),
            cfg.num_patches(),
            cfg.patch_dim()
        )));
    }
    let x = tape.constant(pixels.clone());
    let mut emb = linear(tape, p, x, "patch_embed");
    if let Some(mask) = mask {
        if mask.len() != cfg.num_patches() {
            return Err(Error::shape(format!(
                "mask has {} entries, grid has {}",
                mask.len(),
                cfg.num_patches()
            )));
        }
        if mask.iter().any(|&m| m) {
            let keep: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
            let put: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let kept = tape.scale_rows(emb, keep);
            let masked = tape.outer_const(put, p.get("mask_token"));
            emb = tape.add(kept, masked);
        }
    }
    let seq = tape.concat_rows(&[p.get("cls_token"), emb]);
    Ok(tape.add(seq, p.get("pos_embed")))
}

/// Transformer stack and final norm over an already embedded sequence.
pub fn encode_tokens(tape: &mut Tape, cfg: &ViTConfig, p: &BoundParams, tokens: Var) -> EncoderVars {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = tokens;
    let mut last_attention = Vec::new();
    for i in 0..cfg.depth {
        let pre = format!("blocks.{i}");
        let h = layer_norm(tape, p, x, &format!("{pre}.norm1"));
        let qkv = linear(tape, p, h, &format!("{pre}.attn.qkv"));
        let mut outs = Vec::with_capacity(cfg.heads);
        let mut attn = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let q = tape.slice_cols(qkv, head * dh, dh);
            let k = tape.slice_cols(qkv, d + head * dh, dh);
            let v = tape.slice_cols(qkv, 2 * d + head * dh, dh);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, scale);
            let a = tape.softmax(scores);
            outs.push(tape.matmul(a, v));
            attn.push(a);
        }
        let o = tape.concat_cols(&outs);
        let o = linear(tape, p, o, &format!("{pre}.attn.proj"));
        x = tape.add(x, o);
        let h = layer_norm(tape, p, x, &format!("{pre}.norm2"));
        let h = linear(tape, p, h, &format!("{pre}.mlp.fc1"));
        let h = tape.gelu(h);
        let h = linear(tape, p, h, &format!("{pre}.mlp.fc2"));
        x = tape.add(x, h);
        last_attention = attn;
    }
    let out = layer_norm(tape, p, x, "norm");
    let cls = tape.slice_rows(out, 0, 1);
    let patches = tape.slice_rows(out, 1, cfg.num_patches());
    EncoderVars {
        cls,
        patches,
        last_attention,
    }
}

pub fn encode(
    tape: &mut Tape,
    cfg: &ViTConfig,
    p: &BoundParams,
    pixels: &Array2<f64>,
    mask: Option<&[bool]>,
) -> Result<EncoderVars> {
    let tokens = embed_tokens(tape, cfg, p, pixels, mask)?;
    Ok(encode_tokens(tape, cfg, p, tokens))
}

/// Projection head: 3-layer GELU MLP, L2-normalised bottleneck, then a
/// column-normalised linear map to `head_out_dim` logits. One row per input row.
pub fn project(tape: &mut Tape, p: &BoundParams, prefix: &str, x: Var) -> Var {
    let h = linear(tape, p, x, &format!("{prefix}.mlp.0"));
    let h = tape.gelu(h);
    let h = linear(tape, p, h, &format!("{prefix}.mlp.1"));
    let h = tape.gelu(h);
    let h = linear(tape, p, h, &format!("{prefix}.mlp.2"));
    let h = tape.l2_normalize_rows(h, NORM_EPS);
    let w = tape.normalize_cols(p.get(&format!("{prefix}.last_layer.weight")), NORM_EPS);
    tape.matmul(h, w)
}

pub fn patch_head_prefix(cfg: &ViTConfig) -> &'static str {
    if cfg.shared_head {
        "head"
    } else {
        "patch_head"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenOutputs {
    pub cls: Vec<f64>,
    pub patch_tokens: Array2<f64>,
    /// Absent for exported encoders, which carry no heads.
    pub cls_head_logits: Option<Vec<f64>>,
    pub patch_head_logits: Option<Array2<f64>>,
    /// `[heads][T×T]`
    pub last_layer_attention: Vec<Array2<f64>>,
}

pub fn forward_pixels(
    weights: &ModelWeights,
    pixels: &Array2<f64>,
    mask: Option<&[bool]>,
) -> Result<TokenOutputs> {
    weights.check_finite()?;
    let cfg = &weights.config;
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &weights.params, false);
    let enc = encode(&mut tape, cfg, &p, pixels, mask)?;
    let (cls_head_logits, patch_head_logits) = if weights.has_heads() {
        let c = project(&mut tape, &p, "head", enc.cls);
        let t = project(&mut tape, &p, patch_head_prefix(cfg), enc.patches);
        (
            Some(tape.value(c).row(0).to_vec()),
            Some(tape.value(t).clone()),
        )
    } else {
        (None, None)
    };
    Ok(TokenOutputs {
        cls: tape.value(enc.cls).row(0).to_vec(),
        patch_tokens: tape.value(enc.patches).clone(),
        cls_head_logits,
        patch_head_logits,
        last_layer_attention: enc
            .last_attention
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect(),
    })
}

pub fn forward(weights: &ModelWeights, image: &RgbImage, mask: Option<&[bool]>) -> Result<TokenOutputs> {
    let pixels = patchify(image, &weights.config)?;
    forward_pixels(weights, &pixels, mask)
}

/// Embedded token sequence `[G²+1 × D]` for an image (before the transformer).
pub fn patchify_embed(weights: &ModelWeights, image: &RgbImage) -> Result<Array2<f64>> {
    let pixels = patchify(image, &weights.config)?;
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &weights.params, false);
    let t = embed_tokens(&mut tape, &weights.config, &p, &pixels, None)?;
    Ok(tape.value(t).clone())
}

/// CLS embedding only (no heads, no attention copies).
pub fn embed_cls(weights: &ModelWeights, image: &RgbImage) -> Result<Vec<f64>> {
    let pixels = patchify(image, &weights.config)?;
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &weights.params, false);
    let enc = encode(&mut tape, &weights.config, &p, &pixels, None)?;
    Ok(tape.value(enc.cls).row(0).to_vec())
}

/// Standalone frozen encoder from the teacher branch of a training state.
pub fn export_teacher_encoder(state: &crate::ssl::TrainState) -> Result<ModelWeights> {
    if state.teacher.is_empty() {
        return Err(Error::invalid("training state has no teacher weights"));
    }
    let teacher = ModelWeights {
        config: state.config.clone(),
        params: state.teacher.clone(),
    };
    teacher.check_finite()?;
    Ok(teacher.backbone_only())
}
