//! The configurable Vision Transformer: patchify stem with selectable
//! stem-norm strategy, transformer blocks with every studied LayerNorm
//! placement, class token, learned positional embeddings and a linear
//! classification head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::norm::DEFAULT_EPS;
use crate::rng::SplitMix64;
use crate::tensor::{DType, Graph, NodeId, Result, Tensor};

/// Where LayerNorm sits relative to a residual sub-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Pre,
    Post,
    PrePost,
}

/// Extra LayerNorms inside the sub-layers: NormFormer puts one after the
/// attention output projection and after the MLP non-linearity, Sub-LN
/// before the output projection and before the non-linearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockExtra {
    None,
    Normformer,
    Subln,
}

/// Normalization strategy around the patch-embedding layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemNorm {
    /// Plain dense projection.
    None,
    /// Norm on raw pixel patches only.
    Pre,
    /// Norm on embeddings only.
    Post,
    /// Norm on embeddings after the positional embeddings are added.
    PostPosemb,
    /// Norm on both sides of the projection.
    Dpn,
}

/// Which norm the stem strategies use; the non-default kinds exist for the
/// stem ablations (scale/shift without standardization, RMSNorm,
/// standardization without learnable parameters).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemNormKind {
    LayerNorm,
    AffineOnly,
    RmsNorm,
    NormalizeOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// (height, width) in pixels; both must be divisible by `patch_size`.
    pub image_size: (usize, usize),
    pub channels: usize,
    pub patch_size: usize,
    /// Token width D; must be divisible by `heads`.
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_stem_norm")]
    pub stem_norm: StemNorm,
    #[serde(default = "default_stem_norm_kind")]
    pub stem_norm_kind: StemNormKind,
    #[serde(default = "default_placement")]
    pub block_sa_ln: Placement,
    #[serde(default = "default_placement")]
    pub block_mlp_ln: Placement,
    #[serde(default = "default_block_extra")]
    pub block_extra: BlockExtra,
}

fn default_stem_norm() -> StemNorm {
    StemNorm::None
}
fn default_stem_norm_kind() -> StemNormKind {
    StemNormKind::LayerNorm
}
fn default_placement() -> Placement {
    Placement::Pre
}
fn default_block_extra() -> BlockExtra {
    BlockExtra::None
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let (h, w) = self.image_size;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(format!(
                "image size {}x{} not divisible by patch size {}",
                h, w, self.patch_size
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.depth == 0 || self.num_classes == 0 || self.channels == 0 {
            return Err("depth, num_classes and channels must be positive".into());
        }
        Ok(())
    }

    /// Patch tokens per image: HW / P^2.
    pub fn num_patches(&self) -> usize {
        let (h, w) = self.image_size;
        (h / self.patch_size) * (w / self.patch_size)
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch dimension P^2 * C.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// (hidden, heads, mlp_dim, depth) for the standard named sizes.
pub fn named_variant(name: &str) -> Option<(usize, usize, usize, usize)> {
    match name {
        "Ti" => Some((192, 3, 768, 12)),
        "S" => Some((384, 6, 1536, 12)),
        "B" => Some((768, 12, 3072, 12)),
        "L" => Some((1024, 16, 4096, 24)),
        _ => None,
    }
}

/// The 3x3 cross product of {pre, post, pre_post} for the self-attention
/// and MLP sub-layers.
pub fn placement_grid() -> Vec<(Placement, Placement)> {
    let all = [Placement::Pre, Placement::Post, Placement::PrePost];
    let mut grid = Vec::with_capacity(9);
    for sa in all {
        for mlp in all {
            grid.push((sa, mlp));
        }
    }
    grid
}

// ── parameters ─────────────────────────────────────────────────────────

/// Named hierarchy of learnable tensors with deterministic (lexicographic)
/// iteration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamTree {
    map: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> ParamTree {
        ParamTree::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) {
        let path = path.into();
        let prev = self.map.insert(path.clone(), t.tracked());
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.map.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn to_dtype(&self, dtype: DType) -> ParamTree {
        let map = self.map.iter().map(|(k, v)| (k.clone(), v.to_dtype(dtype))).collect();
        ParamTree { map }
    }
}

enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Truncated normal (|z| < 2 sigma), std = 1/sqrt(fan_in).
    TruncNormalFanIn(usize),
    Normal(f64),
}

/// Deterministic parameter initialization. Kernels draw from a truncated
/// normal with std 1/sqrt(fan_in); positional embeddings from N(0, 0.02);
/// the class token, all biases and every beta start at zero; every gamma
/// at one. The head bias starts at -6.9 when the sigmoid loss is
/// configured so that initial per-class probabilities are ~1e-3.
pub fn init_params(cfg: &ModelConfig, seed: u64, dtype: DType, sigmoid_loss: bool) -> ParamTree {
    let d = cfg.hidden;
    let pd = cfg.patch_dim();
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let norm = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: String, dim: usize| {
        match cfg.stem_norm_kind {
            StemNormKind::LayerNorm | StemNormKind::AffineOnly => {
                specs.push((format!("{prefix}/gamma"), vec![dim], Init::Ones));
                specs.push((format!("{prefix}/beta"), vec![dim], Init::Zeros));
            }
            StemNormKind::RmsNorm => {
                specs.push((format!("{prefix}/gamma"), vec![dim], Init::Ones));
            }
            StemNormKind::NormalizeOnly => {}
        }
    };
    match cfg.stem_norm {
        StemNorm::None => {}
        StemNorm::Pre => norm(&mut specs, "stem/ln0".into(), pd),
        StemNorm::Post | StemNorm::PostPosemb => norm(&mut specs, "stem/ln1".into(), d),
        StemNorm::Dpn => {
            norm(&mut specs, "stem/ln0".into(), pd);
            norm(&mut specs, "stem/ln1".into(), d);
        }
    }
    specs.push(("stem/dense/kernel".into(), vec![pd, d], Init::TruncNormalFanIn(pd)));
    specs.push(("stem/dense/bias".into(), vec![d], Init::Zeros));
    specs.push(("cls".into(), vec![d], Init::Zeros));
    specs.push(("posemb".into(), vec![cfg.seq_len(), d], Init::Normal(0.02)));
    let ln = |specs: &mut Vec<(String, Vec<usize>, Init)>, prefix: String| {
        specs.push((format!("{prefix}/gamma"), vec![d], Init::Ones));
        specs.push((format!("{prefix}/beta"), vec![d], Init::Zeros));
    };
    for b in 0..cfg.depth {
        let p = format!("block{b}");
        if matches!(cfg.block_sa_ln, Placement::Pre | Placement::PrePost) {
            ln(&mut specs, format!("{p}/attn/ln_pre"));
        }
        if matches!(cfg.block_sa_ln, Placement::Post | Placement::PrePost) {
            ln(&mut specs, format!("{p}/attn/ln_post"));
        }
        if cfg.block_extra != BlockExtra::None {
            ln(&mut specs, format!("{p}/attn/ln_inner"));
            // the mid norm sits on the MLP's hidden activations
            specs.push((format!("{p}/mlp/ln_mid/gamma"), vec![cfg.mlp_dim], Init::Ones));
            specs.push((format!("{p}/mlp/ln_mid/beta"), vec![cfg.mlp_dim], Init::Zeros));
        }
        specs.push((format!("{p}/attn/qkv/kernel"), vec![d, 3 * d], Init::TruncNormalFanIn(d)));
        specs.push((format!("{p}/attn/qkv/bias"), vec![3 * d], Init::Zeros));
        specs.push((format!("{p}/attn/out/kernel"), vec![d, d], Init::TruncNormalFanIn(d)));
        specs.push((format!("{p}/attn/out/bias"), vec![d], Init::Zeros));
        if matches!(cfg.block_mlp_ln, Placement::Pre | Placement::PrePost) {
            ln(&mut specs, format!("{p}/mlp/ln_pre"));
        }
        if matches!(cfg.block_mlp_ln, Placement::Post | Placement::PrePost) {
            ln(&mut specs, format!("{p}/mlp/ln_post"));
        }
        specs.push((format!("{p}/mlp/dense1/kernel"), vec![d, cfg.mlp_dim], Init::TruncNormalFanIn(d)));
        specs.push((format!("{p}/mlp/dense1/bias"), vec![cfg.mlp_dim], Init::Zeros));
        specs.push((format!("{p}/mlp/dense2/kernel"), vec![cfg.mlp_dim, d], Init::TruncNormalFanIn(cfg.mlp_dim)));
        specs.push((format!("{p}/mlp/dense2/bias"), vec![d], Init::Zeros));
    }
    ln(&mut specs, "final_ln".into());
    specs.push(("head/kernel".into(), vec![d, cfg.num_classes], Init::TruncNormalFanIn(d)));
    let head_bias = if sigmoid_loss { -6.9 } else { 0.0 };
    specs.push(("head/bias".into(), vec![cfg.num_classes], Init::Const(head_bias)));

    // one draw stream per parameter, keyed by the path, so the values do
    // not depend on enumeration order
    specs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut tree = ParamTree::new();
    for (path, shape, init) in specs {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::TruncNormalFanIn(fan_in) => {
                let std = 1.0 / (fan_in as f64).sqrt();
                let mut rng = SplitMix64::new_stream(seed, path_hash(&path));
                (0..n).map(|_| rng.next_trunc_normal(std)).collect()
            }
            Init::Normal(std) => {
                let mut rng = SplitMix64::new_stream(seed, path_hash(&path));
                (0..n).map(|_| rng.next_normal() * std).collect()
            }
        };
        tree.insert(path, Tensor::from_vec(shape, data, dtype));
    }
    tree
}

/// FNV-1a, documented so ports can reproduce the init streams.
fn path_hash(path: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in path.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

// ── forward pass ───────────────────────────────────────────────────────

/// Parameter tensors loaded on a graph as tracked leaves.
pub struct ParamNodes {
    map: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn node(&self, path: &str) -> NodeId {
        *self.map.get(path).unwrap_or_else(|| panic!("missing parameter {path}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

pub fn load_params(g: &mut Graph, tree: &ParamTree) -> ParamNodes {
    let map = tree.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone()))).collect();
    ParamNodes { map }
}

/// Rearrange `[B, H, W, C]` into non-overlapping patches
/// `[B, HW/P^2, P^2*C]`, rows scanning patches left-to-right then
/// top-to-bottom and pixels within a patch likewise.
pub fn patchify(g: &mut Graph, image: NodeId, patch: usize) -> Result<NodeId> {
    let shape = g.value(image).shape().to_vec();
    assert_eq!(shape.len(), 4, "patchify expects [B, H, W, C]");
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(crate::tensor::TensorError::NonDivisibleAxis {
            op: "patchify",
            len: h.max(w),
            by: patch.max(1),
        });
    }
    let (ht, wt) = (h / patch, w / patch);
    let split = g.reshape(image, vec![b, ht, patch, wt, patch, c])?;
    let grouped = g.permute(split, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(grouped, vec![b, ht * wt, patch * patch * c])
}

/// Inverse of [`patchify`]: tokens `[B, HW/P^2, P^2*C]` back to images
/// `[B, H, W, C]`. The round trip is bitwise (pure index shuffles).
pub fn unpatchify(
    g: &mut Graph,
    tokens: NodeId,
    image_size: (usize, usize),
    patch: usize,
    channels: usize,
) -> Result<NodeId> {
    let b = g.value(tokens).shape()[0];
    let (h, w) = image_size;
    let (ht, wt) = (h / patch, w / patch);
    let split = g.reshape(tokens, vec![b, ht, wt, patch, patch, channels])?;
    let grouped = g.permute(split, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(grouped, vec![b, h, w, channels])
}

fn apply_stem_norm(
    g: &mut Graph,
    x: NodeId,
    kind: StemNormKind,
    params: &ParamNodes,
    prefix: &str,
) -> Result<NodeId> {
    match kind {
        StemNormKind::LayerNorm => {
            let gamma = params.node(&format!("{prefix}/gamma"));
            let beta = params.node(&format!("{prefix}/beta"));
            g.layer_norm(x, gamma, beta, DEFAULT_EPS)
        }
        StemNormKind::AffineOnly => {
            let gamma = params.node(&format!("{prefix}/gamma"));
            let beta = params.node(&format!("{prefix}/beta"));
            let scaled = g.mul(x, gamma)?;
            g.add(scaled, beta)
        }
        StemNormKind::RmsNorm => {
            let gamma = params.node(&format!("{prefix}/gamma"));
            g.rms_norm(x, gamma, DEFAULT_EPS)
        }
        StemNormKind::NormalizeOnly => g.normalize_only(x, DEFAULT_EPS),
    }
}

/// Project patches to embeddings under the configured stem strategy.
/// Returns the embeddings and a flag telling the caller to apply
/// `stem/ln1` after the positional embeddings are added (the post-posemb
/// strategy).
pub fn stem_forward(
    g: &mut Graph,
    patches: NodeId,
    cfg: &ModelConfig,
    params: &ParamNodes,
) -> Result<(NodeId, bool)> {
    g.set_scope("stem");
    let x = match cfg.stem_norm {
        StemNorm::Pre | StemNorm::Dpn => {
            apply_stem_norm(g, patches, cfg.stem_norm_kind, params, "stem/ln0")?
        }
        _ => patches,
    };
    let kernel = params.node("stem/dense/kernel");
    let bias = params.node("stem/dense/bias");
    let proj = g.matmul(x, kernel)?;
    let embedded = g.add(proj, bias)?;
    let out = match cfg.stem_norm {
        StemNorm::Post | StemNorm::Dpn => {
            apply_stem_norm(g, embedded, cfg.stem_norm_kind, params, "stem/ln1")?
        }
        _ => embedded,
    };
    Ok((out, cfg.stem_norm == StemNorm::PostPosemb))
}

fn layer_norm_at(g: &mut Graph, x: NodeId, params: &ParamNodes, prefix: &str) -> Result<NodeId> {
    let gamma = params.node(&format!("{prefix}/gamma"));
    let beta = params.node(&format!("{prefix}/beta"));
    g.layer_norm(x, gamma, beta, DEFAULT_EPS)
}

fn dense_at(g: &mut Graph, x: NodeId, params: &ParamNodes, prefix: &str) -> Result<NodeId> {
    let kernel = params.node(&format!("{prefix}/kernel"));
    let bias = params.node(&format!("{prefix}/bias"));
    let y = g.matmul(x, kernel)?;
    g.add(y, bias)
}

/// Multi-head self-attention with residual connection and the configured
/// LayerNorm placement. Logits are scaled by 1/sqrt(D/heads).
pub fn attention_block(
    g: &mut Graph,
    x: NodeId,
    cfg: &ModelConfig,
    params: &ParamNodes,
    block: usize,
) -> Result<NodeId> {
    g.set_scope(format!("block{block}/attn"));
    let p = format!("block{block}/attn");
    let (b, n, d) = {
        let s = g.value(x).shape();
        (s[0], s[1], s[2])
    };
    let heads = cfg.heads;
    let hd = d / heads;

    let inner_in = if matches!(cfg.block_sa_ln, Placement::Pre | Placement::PrePost) {
        layer_norm_at(g, x, params, &format!("{p}/ln_pre"))?
    } else {
        x
    };
    let qkv = dense_at(g, inner_in, params, &format!("{p}/qkv"))?; // [B,N,3D]
    let q = g.slice(qkv, 2, 0, d)?;
    let kk = g.slice(qkv, 2, d, d)?;
    let v = g.slice(qkv, 2, 2 * d, d)?;
    let to_heads = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
        let r = g.reshape(t, vec![b, n, heads, hd])?;
        g.permute(r, &[0, 2, 1, 3]) // [B,H,N,hd]
    };
    let qh = to_heads(g, q)?;
    let kh = to_heads(g, kk)?;
    let vh = to_heads(g, v)?;
    let kt = g.permute(kh, &[0, 1, 3, 2])?; // [B,H,hd,N]
    let scores = g.matmul(qh, kt)?;
    let scaled = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
    let attn = g.softmax(scaled, 3)?;
    let ctx = g.matmul(attn, vh)?; // [B,H,N,hd]
    let merged = g.permute(ctx, &[0, 2, 1, 3])?;
    let flat = g.reshape(merged, vec![b, n, d])?;
    let pre_out = if cfg.block_extra == BlockExtra::Subln {
        layer_norm_at(g, flat, params, &format!("{p}/ln_inner"))?
    } else {
        flat
    };
    let projected = dense_at(g, pre_out, params, &format!("{p}/out"))?;
    let sa = if cfg.block_extra == BlockExtra::Normformer {
        layer_norm_at(g, projected, params, &format!("{p}/ln_inner"))?
    } else {
        projected
    };
    let branch = if matches!(cfg.block_sa_ln, Placement::Post | Placement::PrePost) {
        layer_norm_at(g, sa, params, &format!("{p}/ln_post"))?
    } else {
        sa
    };
    g.add(x, branch)
}

/// Two-layer GELU MLP with residual connection and the configured
/// LayerNorm placement.
pub fn mlp_block(
    g: &mut Graph,
    x: NodeId,
    cfg: &ModelConfig,
    params: &ParamNodes,
    block: usize,
) -> Result<NodeId> {
    g.set_scope(format!("block{block}/mlp"));
    let p = format!("block{block}/mlp");
    let inner_in = if matches!(cfg.block_mlp_ln, Placement::Pre | Placement::PrePost) {
        layer_norm_at(g, x, params, &format!("{p}/ln_pre"))?
    } else {
        x
    };
    let h1 = dense_at(g, inner_in, params, &format!("{p}/dense1"))?;
    let pre_act = if cfg.block_extra == BlockExtra::Subln {
        layer_norm_at(g, h1, params, &format!("{p}/ln_mid"))?
    } else {
        h1
    };
    let act = g.gelu(pre_act)?;
    let post_act = if cfg.block_extra == BlockExtra::Normformer {
        layer_norm_at(g, act, params, &format!("{p}/ln_mid"))?
    } else {
        act
    };
    let h2 = dense_at(g, post_act, params, &format!("{p}/dense2"))?;
    let branch = if matches!(cfg.block_mlp_ln, Placement::Post | Placement::PrePost) {
        layer_norm_at(g, h2, params, &format!("{p}/ln_post"))?
    } else {
        h2
    };
    g.add(x, branch)
}

/// Full pipeline: patchify, stem, class token, positional embeddings,
/// transformer blocks, final LayerNorm, class-token head.
pub fn vit_forward(
    g: &mut Graph,
    image: NodeId,
    cfg: &ModelConfig,
    params: &ParamNodes,
) -> Result<NodeId> {
    let b = g.value(image).shape()[0];
    let patches = patchify(g, image, cfg.patch_size)?;
    let (embedded, posemb_ln) = stem_forward(g, patches, cfg, params)?;

    g.set_scope("tokens");
    let cls = params.node("cls");
    let cls_row = g.reshape(cls, vec![1, cfg.hidden])?;
    let cls_batch = g.tile_lead(cls_row, b)?; // [B,1,D]
    let seq = g.concat(&[cls_batch, embedded], 1)?;
    let posemb = params.node("posemb");
    let seq = g.add(seq, posemb)?;
    // the deferred post-posemb norm covers the whole sequence, class token
    // included
    let mut x = if posemb_ln {
        apply_stem_norm(g, seq, cfg.stem_norm_kind, params, "stem/ln1")?
    } else {
        seq
    };

    for blk in 0..cfg.depth {
        x = attention_block(g, x, cfg, params, blk)?;
        x = mlp_block(g, x, cfg, params, blk)?;
    }

    g.set_scope("head");
    let x = layer_norm_at(g, x, params, "final_ln")?;
    let cls_out = g.slice(x, 1, 0, 1)?;
    let pooled = g.reshape(cls_out, vec![b, cfg.hidden])?;
    let logits = dense_at(g, pooled, params, "head")?;
    g.set_scope("");
    Ok(logits)
}

// ── positional-embedding interpolation ─────────────────────────────────

/// Bilinear resampling (corner-aligned) of the positional-embedding grid
/// to a new token grid; the class-token row passes through unchanged.
/// The patch rows must form a square grid.
pub fn posemb_interpolate(posemb: &Tensor, new_grid: (usize, usize)) -> std::result::Result<Tensor, String> {
    if posemb.rank() != 2 {
        return Err(format!("positional embeddings must be 2-d, got {:?}", posemb.shape()));
    }
    let n = posemb.shape()[0] - 1;
    let d = posemb.shape()[1];
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(format!("{n} patch rows do not form a square grid"));
    }
    let (nh, nw) = new_grid;
    if nh == 0 || nw == 0 {
        return Err("target grid must be non-empty".into());
    }
    if (nh, nw) == (side, side) {
        return Ok(posemb.clone());
    }
    let src = &posemb.data()[d..]; // skip class-token row
    let mut out = Vec::with_capacity((nh * nw + 1) * d);
    out.extend_from_slice(&posemb.data()[..d]);
    let coord = |i: usize, new_len: usize| -> f64 {
        if new_len == 1 {
            0.0
        } else {
            i as f64 * (side - 1) as f64 / (new_len - 1) as f64
        }
    };
    for i in 0..nh {
        let y = coord(i, nh);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let fy = y - y0 as f64;
        for j in 0..nw {
            let x = coord(j, nw);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let fx = x - x0 as f64;
            for c in 0..d {
                let at = |r: usize, cc: usize| src[(r * side + cc) * d + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_vec(vec![nh * nw + 1, d], out, posemb.dtype()))
}

/// Layer group for gradient-norm reporting: the stem covers everything
/// before the first block (patch embedding, class token, positional
/// embeddings), the head covers the final norm and classifier.
pub fn layer_group(path: &str) -> String {
    let first = path.split('/').next().unwrap_or(path);
    match first {
        "stem" | "cls" | "posemb" => "stem".to_string(),
        "final_ln" | "head" => "head".to_string(),
        other => other.to_string(),
    }
}

// ── end-to-end gradient verification ───────────────────────────────────

/// Two-image, two-class model (depth 2, D=16) small enough to
/// finite-difference every parameter.
pub fn micro_config(
    stem_norm: StemNorm,
    sa: Placement,
    mlp: Placement,
    extra: BlockExtra,
) -> ModelConfig {
    ModelConfig {
        image_size: (4, 4),
        channels: 1,
        patch_size: 2,
        hidden: 16,
        depth: 2,
        heads: 2,
        mlp_dim: 32,
        num_classes: 2,
        stem_norm,
        stem_norm_kind: StemNormKind::LayerNorm,
        block_sa_ln: sa,
        block_mlp_ln: mlp,
        block_extra: extra,
    }
}

#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub elements: usize,
    pub max_rel_error: f64,
    /// Parameter path and flat index where the worst error occurred.
    pub worst: (String, usize),
}

impl ModelGradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compare every parameter gradient of the full model (sigmoid loss on a
/// fixed random batch) against central differences. Double precision.
pub fn model_grad_check(cfg: &ModelConfig, seed: u64, step: f64) -> Result<ModelGradCheck> {
    let tree = init_params(cfg, seed, DType::F64, true);
    let (h, w) = cfg.image_size;
    let batch = 2;
    let mut rng = SplitMix64::new_stream(seed, 0x0ddba11);
    let image = Tensor::from_vec(
        vec![batch, h, w, cfg.channels],
        (0..batch * h * w * cfg.channels).map(|_| rng.next_f64() * 2.0 - 1.0).collect(),
        DType::F64,
    );
    let mut targets = vec![0.0; batch * cfg.num_classes];
    for b in 0..batch {
        targets[b * cfg.num_classes + b % cfg.num_classes] = 1.0;
    }
    let targets = Tensor::from_vec(vec![batch, cfg.num_classes], targets, DType::F64);

    let run = |tree: &ParamTree, want_grads: bool| -> Result<(f64, Option<Vec<(String, Vec<f64>)>>)> {
        let mut g = Graph::new();
        let img = g.leaf(image.clone().with_tracking(false));
        let tgt = g.leaf(targets.clone().with_tracking(false));
        let params = load_params(&mut g, tree);
        let logits = vit_forward(&mut g, img, cfg, &params)?;
        let loss = g.sigmoid_xent(logits, tgt)?;
        let value = g.value(loss).item();
        if !want_grads {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        let per_param = params
            .iter()
            .map(|(path, id)| (path.clone(), grads.get_or_zeros(*id, g.value(*id).numel())))
            .collect();
        Ok((value, Some(per_param)))
    };

    let (_, analytic) = run(&tree, true)?;
    let analytic = analytic.unwrap();
    let mut probe = tree.clone();
    let mut elements = 0;
    let mut max_rel = 0.0f64;
    let mut worst = (String::new(), 0);
    for (path, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = probe.get(path).unwrap().data()[i];
            probe.get_mut(path).unwrap().set(i, orig + step);
            let (fp, _) = run(&probe, false)?;
            probe.get_mut(path).unwrap().set(i, orig - step);
            let (fm, _) = run(&probe, false)?;
            probe.get_mut(path).unwrap().set(i, orig);
            let numeric = (fp - fm) / (2.0 * step);
            let e = crate::tensor::rel_error(grad[i], numeric);
            if e > max_rel {
                max_rel = e;
                worst = (path.clone(), i);
            }
            elements += 1;
        }
    }
    Ok(ModelGradCheck { elements, max_rel_error: max_rel, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::{self, NormParams};

    fn tiny_cfg() -> ModelConfig {
        micro_config(StemNorm::Dpn, Placement::Pre, Placement::Pre, BlockExtra::None)
    }

    #[test]
    fn patchify_enumerates_the_documented_example() {
        // 4x4 image, P=2: four patches scanned left-to-right, top-to-bottom
        let mut g = Graph::new();
        let img = g.leaf(Tensor::from_vec(
            vec![1, 4, 4, 1],
            (0..16).map(|v| v as f64).collect(),
            DType::F64,
        ));
        let out = patchify(&mut g, img, 2).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 4, 4]);
        let expect = [
            0.0, 1.0, 4.0, 5.0, //
            2.0, 3.0, 6.0, 7.0, //
            8.0, 9.0, 12.0, 13.0, //
            10.0, 11.0, 14.0, 15.0,
        ];
        assert_eq!(g.value(out).data(), &expect);
    }

    #[test]
    fn patchify_matches_index_arithmetic_on_random_shapes() {
        let mut rng = SplitMix64::new(7);
        for _ in 0..20 {
            let p = 1 + rng.next_below(3) as usize;
            let ht = 1 + rng.next_below(3) as usize;
            let wt = 1 + rng.next_below(3) as usize;
            let c = 1 + rng.next_below(3) as usize;
            let b = 1 + rng.next_below(2) as usize;
            let (h, w) = (ht * p, wt * p);
            let numel = b * h * w * c;
            let data: Vec<f64> = (0..numel).map(|v| v as f64).collect();
            let mut g = Graph::new();
            let img = g.leaf(Tensor::from_vec(vec![b, h, w, c], data.clone(), DType::F64));
            let out = patchify(&mut g, img, p).unwrap();
            assert_eq!(g.value(out).shape(), &[b, ht * wt, p * p * c]);
            let got = g.value(out).data();
            for bi in 0..b {
                for ti in 0..ht {
                    for tj in 0..wt {
                        for pr in 0..p {
                            for pc in 0..p {
                                for ch in 0..c {
                                    let token = ti * wt + tj;
                                    let within = (pr * p + pc) * c + ch;
                                    let src = ((bi * h + ti * p + pr) * w + tj * p + pc) * c + ch;
                                    let dst = (bi * ht * wt + token) * p * p * c + within;
                                    assert_eq!(got[dst], data[src]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unpatchify_round_trip_is_bitwise() {
        let mut rng = SplitMix64::new(11);
        let data: Vec<f64> = (0..2 * 6 * 4 * 3).map(|_| rng.next_f64()).collect();
        let mut g = Graph::new();
        let img = g.leaf(Tensor::from_vec(vec![2, 6, 4, 3], data.clone(), DType::F64));
        let tokens = patchify(&mut g, img, 2).unwrap();
        let back = unpatchify(&mut g, tokens, (6, 4), 2, 3).unwrap();
        assert_eq!(g.value(back).shape(), &[2, 6, 4, 3]);
        assert!(g.value(back).data().iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn dpn_stem_matches_the_ln_dense_ln_oracle() {
        let cfg = tiny_cfg();
        let tree = init_params(&cfg, 3, DType::F64, true);
        let mut rng = SplitMix64::new(99);
        for _ in 0..10 {
            let patches = Tensor::from_vec(
                vec![2, cfg.num_patches(), cfg.patch_dim()],
                (0..2 * cfg.num_patches() * cfg.patch_dim())
                    .map(|_| rng.next_f64() * 2.0 - 1.0)
                    .collect(),
                DType::F64,
            );
            let mut g = Graph::new();
            let pid = g.leaf(patches.clone());
            let params = load_params(&mut g, &tree);
            let (out, deferred) = stem_forward(&mut g, pid, &cfg, &params).unwrap();
            assert!(!deferred);

            // independent composition of the pure-function pieces
            let ln0 = NormParams {
                gamma: tree.get("stem/ln0/gamma").unwrap().clone(),
                beta: tree.get("stem/ln0/beta").unwrap().clone(),
                eps: DEFAULT_EPS,
            };
            let ln1 = NormParams {
                gamma: tree.get("stem/ln1/gamma").unwrap().clone(),
                beta: tree.get("stem/ln1/beta").unwrap().clone(),
                eps: DEFAULT_EPS,
            };
            let normed = norm::layer_norm(&patches, &ln0);
            let kernel = tree.get("stem/dense/kernel").unwrap();
            let bias = tree.get("stem/dense/bias").unwrap();
            let (pd, d) = (cfg.patch_dim(), cfg.hidden);
            let rows = normed.numel() / pd;
            let mut proj = vec![0.0; rows * d];
            for r in 0..rows {
                for j in 0..d {
                    let mut acc = bias.data()[j];
                    for k in 0..pd {
                        acc += normed.data()[r * pd + k] * kernel.data()[k * d + j];
                    }
                    proj[r * d + j] = acc;
                }
            }
            let proj = Tensor::from_vec(vec![2, cfg.num_patches(), d], proj, DType::F64);
            let oracle = norm::layer_norm(&proj, &ln1);
            for (a, b) in g.value(out).data().iter().zip(oracle.data()) {
                assert!((a - b).abs() < 1e-12, "dpn stem deviates: {a} vs {b}");
            }
        }
    }

    #[test]
    fn placement_grid_is_the_full_cross_product() {
        let grid = placement_grid();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], (Placement::Pre, Placement::Pre));
        let mut uniq = grid.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 9);
    }

    #[test]
    fn init_shapes_and_constants() {
        let cfg = tiny_cfg();
        let tree = init_params(&cfg, 0, DType::F64, true);
        // pixel-space norm lives on the flattened patch axis
        assert_eq!(tree.get("stem/ln0/gamma").unwrap().shape(), &[cfg.patch_dim()]);
        assert!(tree.get("stem/ln0/gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(tree.get("stem/ln1/beta").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(tree.get("cls").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(tree.get("posemb").unwrap().shape(), &[cfg.seq_len(), cfg.hidden]);
        assert!(tree.get("head/bias").unwrap().data().iter().all(|&v| v == -6.9));
        let softmax_tree = init_params(&cfg, 0, DType::F64, false);
        assert!(softmax_tree.get("head/bias").unwrap().data().iter().all(|&v| v == 0.0));
        // same seed, same tree
        assert_eq!(tree, init_params(&cfg, 0, DType::F64, true));
        assert_ne!(
            tree.get("stem/dense/kernel").unwrap().data(),
            init_params(&cfg, 1, DType::F64, true).get("stem/dense/kernel").unwrap().data()
        );
    }

    #[test]
    fn kernel_init_scale_tracks_fan_in() {
        let mut cfg = tiny_cfg();
        cfg.hidden = 64;
        cfg.heads = 4;
        let tree = init_params(&cfg, 5, DType::F64, true);
        let k = tree.get("block0/attn/qkv/kernel").unwrap();
        let std: f64 = (k.data().iter().map(|v| v * v).sum::<f64>() / k.numel() as f64).sqrt();
        // truncation at |z| < 2 shrinks the std of N(0, sigma) to ~0.88 sigma
        let sigma = 1.0 / (cfg.hidden as f64).sqrt();
        let expect = 0.8796 * sigma;
        assert!((std - expect).abs() / expect < 0.05, "std {std} vs {expect}");
        assert!(k.data().iter().all(|v| v.abs() < 2.0 * sigma));
    }

    #[test]
    fn forward_produces_logits_for_every_stem_strategy() {
        for stem in [StemNorm::None, StemNorm::Pre, StemNorm::Post, StemNorm::PostPosemb, StemNorm::Dpn] {
            let cfg = micro_config(stem, Placement::Pre, Placement::Post, BlockExtra::Normformer);
            let tree = init_params(&cfg, 2, DType::F64, true);
            let mut g = Graph::new();
            let mut rng = SplitMix64::new(4);
            let img = g.leaf(Tensor::from_vec(
                vec![3, 4, 4, 1],
                (0..48).map(|_| rng.next_f64()).collect(),
                DType::F64,
            ));
            let params = load_params(&mut g, &tree);
            let logits = vit_forward(&mut g, img, &cfg, &params).unwrap();
            assert_eq!(g.value(logits).shape(), &[3, cfg.num_classes]);
            assert!(g.value(logits).data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = micro_config(StemNorm::Dpn, Placement::PrePost, Placement::PrePost, BlockExtra::Subln);
        let tree = init_params(&cfg, 8, DType::F64, true);
        let run = || {
            let mut g = Graph::new();
            let mut rng = SplitMix64::new(21);
            let img = g.leaf(Tensor::from_vec(
                vec![2, 4, 4, 1],
                (0..32).map(|_| rng.next_f64()).collect(),
                DType::F64,
            ));
            let params = load_params(&mut g, &tree);
            let logits = vit_forward(&mut g, img, &cfg, &params).unwrap();
            g.value(logits).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn full_model_gradients_survive_finite_differences() {
        // one exemplar per extra; the acceptance suite runs the full grid
        for (stem, sa, mlp, extra) in [
            (StemNorm::Dpn, Placement::Pre, Placement::Pre, BlockExtra::None),
            (StemNorm::PostPosemb, Placement::Post, Placement::PrePost, BlockExtra::Normformer),
            (StemNorm::None, Placement::PrePost, Placement::Pre, BlockExtra::Subln),
        ] {
            let cfg = micro_config(stem, sa, mlp, extra);
            let report = model_grad_check(&cfg, 42, 1e-5).unwrap();
            assert!(
                report.passed(1e-4),
                "max rel error {} at {:?} for {stem:?}/{sa:?}/{mlp:?}/{extra:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }

    #[test]
    fn posemb_interpolation_cases() {
        // 2x2 grid, one channel, corner-aligned bilinear to 3x3
        let mut data = vec![9.0]; // class-token row, must pass through
        data.extend([0.0, 1.0, 2.0, 3.0]);
        let pe = Tensor::from_vec(vec![5, 1], data, DType::F64);
        let out = posemb_interpolate(&pe, (3, 3)).unwrap();
        assert_eq!(out.shape(), &[10, 1]);
        assert_eq!(out.data()[0], 9.0);
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in out.data()[1..].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // same-size is an exact copy
        let same = posemb_interpolate(&pe, (2, 2)).unwrap();
        assert_eq!(same.data(), pe.data());
        // non-square source grids are rejected
        let bad = Tensor::from_vec(vec![4, 1], vec![0.0; 4], DType::F64);
        assert!(posemb_interpolate(&bad, (2, 2)).is_err());
        // downsampling to a single token picks the grid origin
        let one = posemb_interpolate(&pe, (1, 1)).unwrap();
        assert_eq!(one.data(), &[9.0, 0.0]);
    }

    #[test]
    fn named_variants_match_standard_dims() {
        assert_eq!(named_variant("Ti"), Some((192, 3, 768, 12)));
        assert_eq!(named_variant("S"), Some((384, 6, 1536, 12)));
        assert_eq!(named_variant("B"), Some((768, 12, 3072, 12)));
        assert_eq!(named_variant("L"), Some((1024, 16, 4096, 24)));
        assert_eq!(named_variant("XL"), None);
    }

    #[test]
    fn layer_groups_partition_the_tree() {
        let cfg = tiny_cfg();
        let tree = init_params(&cfg, 0, DType::F64, true);
        for (path, _) in tree.iter() {
            let grp = layer_group(path);
            assert!(
                grp == "stem" || grp == "head" || grp.starts_with("block"),
                "unexpected group {grp} for {path}"
            );
        }
        assert_eq!(layer_group("cls"), "stem");
        assert_eq!(layer_group("posemb"), "stem");
        assert_eq!(layer_group("final_ln/gamma"), "head");
        assert_eq!(layer_group("block3/mlp/dense1/kernel"), "block3");
    }

    #[test]
    fn config_validation_rejects_bad_geometry() {
        let mut cfg = tiny_cfg();
        assert!(cfg.validate().is_ok());
        cfg.patch_size = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }
}
