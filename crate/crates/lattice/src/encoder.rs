//! ViT-style image encoder with per-block feature taps and LoRA-wrapped
//! attention projections over a frozen base.
//!
//! The encoder tokenizes the image into non-overlapping patches, prepends a
//! class token, adds learned positional embeddings, and runs `k` pre-norm
//! transformer blocks. `encoder_forward` returns all k+1 token arrays
//! h_v^(0)..h_v^(k) — h_v^(0) is the block-1 input (with positional
//! embeddings), h_v^(i) the output of block i — so downstream consumers can
//! tap intermediate depths.
//!
//! LoRA replaces a targeted projection weight by W0 + scaling·(B·A) with W0
//! frozen; only the factor matrices (names under `lora.`) are trainable.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::params::{trunc_normal, zeros, Binder, ParamStore};

/// Std used for all truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSpec {
    pub rank: usize,
    /// 1-indexed encoder block ids. Empty means "fill with the default
    /// placement for the encoder depth" at config resolution.
    pub target_blocks: Vec<usize>,
    pub target_projections: Vec<LoraTarget>,
    pub scaling: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec {
            rank: 4,
            target_blocks: Vec::new(),
            target_projections: vec![LoraTarget::Query, LoraTarget::Value],
            scaling: 1.0,
        }
    }
}

impl LoraSpec {
    /// Default placement: query and value projections of the last ⌈k/4⌉
    /// blocks, rank 4, scaling 1.
    pub fn default_for(num_blocks: usize) -> Self {
        let n = num_blocks.div_ceil(4);
        LoraSpec {
            rank: 4,
            target_blocks: (num_blocks - n + 1..=num_blocks).collect(),
            target_projections: vec![LoraTarget::Query, LoraTarget::Value],
            scaling: 1.0,
        }
    }

    pub fn targets(&self, block: usize, proj: LoraTarget) -> bool {
        self.target_blocks.contains(&block) && self.target_projections.contains(&proj)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub in_channels: usize,
    pub mlp_ratio: usize,
    pub lora: Option<LoraSpec>,
}

/// Desk-scale defaults: a small encoder that trains on CPU in minutes.
impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_blocks: 3,
            embed_dim: 24,
            num_heads: 4,
            patch_size: 4,
            image_size: (32, 32),
            in_channels: 3,
            mlp_ratio: 2,
            lora: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.num_blocks == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::Config(
                "encoder num_blocks, embed_dim, num_heads must be positive".into(),
            ));
        }
        if self.patch_size == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "encoder patch_size, in_channels, mlp_ratio must be positive".into(),
            ));
        }
        if h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {h}x{w} not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if let Some(lora) = &self.lora {
            if lora.rank == 0 {
                return Err(Error::Config("lora rank must be positive".into()));
            }
            // Targeted weights are square embed_dim matrices, so the
            // low-rank condition reduces to r ≤ embed_dim.
            if lora.rank > self.embed_dim {
                return Err(Error::Config(format!(
                    "lora rank {} exceeds projection dim {}",
                    lora.rank, self.embed_dim
                )));
            }
            if lora.target_blocks.is_empty() || lora.target_projections.is_empty() {
                return Err(Error::Config("lora targets must be non-empty".into()));
            }
            for &b in &lora.target_blocks {
                if b == 0 || b > self.num_blocks {
                    return Err(Error::Config(format!(
                        "lora target block {b} outside 1..={}",
                        self.num_blocks
                    )));
                }
            }
        }
        Ok(())
    }

    /// Token grid (rows, cols) = (h/P, w/P).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (gr, gc) = self.grid();
        gr * gc
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }
}

/// Effective LoRA-adapted weight W0 + scaling·(B·A), as a pure function.
pub fn lora_effective_weight(
    w0: &Array2<f64>,
    b: &Array2<f64>,
    a: &Array2<f64>,
    scaling: f64,
) -> Result<Array2<f64>> {
    let (d1, d2) = w0.dim();
    if b.dim().0 != d1 || a.dim().1 != d2 || b.dim().1 != a.dim().0 {
        return Err(Error::Config(format!(
            "lora shape mismatch: W0 {d1}x{d2}, B {:?}, A {:?}",
            b.dim(),
            a.dim()
        )));
    }
    Ok(w0 + &(b.dot(a) * scaling))
}

/// Names of encoder-side trainable parameters: exactly the LoRA factors.
/// The base encoder is frozen whether or not LoRA is configured.
pub fn encoder_trainable_names(store: &ParamStore) -> Vec<String> {
    store.names_with_prefix(&["lora."])
}

fn linear_names(prefix: &str) -> (String, String) {
    (format!("{prefix}.w"), format!("{prefix}.b"))
}

fn init_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) {
    let (w, b) = linear_names(prefix);
    store.insert(&w, trunc_normal(rng, &[d_in, d_out], INIT_STD));
    store.insert(&b, zeros(&[d_out]));
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(&format!("{prefix}.gamma"), crate::params::ones(&[dim]));
    store.insert(&format!("{prefix}.beta"), zeros(&[dim]));
}

/// Create all encoder (and LoRA) parameters under `enc.` / `lora.`.
pub fn init_encoder<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.embed_dim;
    let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    init_linear(store, rng, "enc.patch_embed", patch_dim, d);
    store.insert("enc.cls", trunc_normal(rng, &[1, d], INIT_STD));
    store.insert("enc.pos", trunc_normal(rng, &[cfg.num_tokens(), d], INIT_STD));
    for blk in 1..=cfg.num_blocks {
        let p = format!("enc.block{blk}");
        init_layer_norm(store, &format!("{p}.ln1"), d);
        init_linear(store, rng, &format!("{p}.attn.wq"), d, d);
        init_linear(store, rng, &format!("{p}.attn.wk"), d, d);
        init_linear(store, rng, &format!("{p}.attn.wv"), d, d);
        init_linear(store, rng, &format!("{p}.attn.wo"), d, d);
        init_layer_norm(store, &format!("{p}.ln2"), d);
        init_linear(store, rng, &format!("{p}.mlp.fc1"), d, cfg.mlp_ratio * d);
        init_linear(store, rng, &format!("{p}.mlp.fc2"), cfg.mlp_ratio * d, d);
    }
    if let Some(lora) = &cfg.lora {
        for &blk in &lora.target_blocks {
            for proj in &lora.target_projections {
                let tag = match proj {
                    LoraTarget::Query => "q",
                    LoraTarget::Value => "v",
                };
                // A starts random, B at zero, so B·A = 0 and training
                // begins from the frozen base exactly.
                store.insert(
                    &format!("lora.block{blk}.{tag}.a"),
                    trunc_normal(rng, &[lora.rank, d], INIT_STD),
                );
                store.insert(&format!("lora.block{blk}.{tag}.b"), zeros(&[d, lora.rank]));
            }
        }
    }
}

/// Weight node for a possibly-LoRA-wrapped projection: either the frozen
/// base leaf alone, or base + scaling·(B·A) assembled on-tape so gradients
/// reach the factors.
fn proj_weight(
    g: &mut Binder,
    cfg: &EncoderConfig,
    block: usize,
    proj: LoraTarget,
    base_name: &str,
) -> Result<NodeId> {
    let w0 = g.p(base_name)?;
    let Some(lora) = &cfg.lora else { return Ok(w0) };
    if !lora.targets(block, proj) {
        return Ok(w0);
    }
    let tag = match proj {
        LoraTarget::Query => "q",
        LoraTarget::Value => "v",
    };
    let a = g.p(&format!("lora.block{block}.{tag}.a"))?;
    let b = g.p(&format!("lora.block{block}.{tag}.b"))?;
    let ba = g.t.matmul(b, a);
    let scaled = g.t.scale(ba, lora.scaling);
    Ok(g.t.add(w0, scaled))
}

/// The assembled W0 + scaling·(B·A) for a projection, read back off the
/// tape. Exposes the exact composition the forward pass uses so it can be
/// witnessed against the dense [`lora_effective_weight`] reference.
pub fn lora_effective_weight_on_tape(
    store: &ParamStore,
    cfg: &EncoderConfig,
    block: usize,
    proj: LoraTarget,
    base_name: &str,
) -> Result<ndarray::Array2<f64>> {
    let mut g = Binder::new(store);
    let node = proj_weight(&mut g, cfg, block, proj, base_name)?;
    Ok(crate::graph::view2(g.t.value(node)).to_owned())
}

/// x·W + b for a named linear layer, with an optional pre-built weight node.
fn linear(g: &mut Binder, x: NodeId, prefix: &str, weight: Option<NodeId>) -> Result<NodeId> {
    let (wn, bn) = linear_names(prefix);
    let w = match weight {
        Some(w) => w,
        None => g.p(&wn)?,
    };
    let b = g.p(&bn)?;
    let y = g.t.matmul(x, w);
    Ok(g.t.add_row(y, b))
}

fn layer_norm(g: &mut Binder, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gamma = g.p(&format!("{prefix}.gamma"))?;
    let beta = g.p(&format!("{prefix}.beta"))?;
    Ok(g.t.layer_norm(x, gamma, beta))
}

/// Multi-head self-attention over (n, d) tokens. Weight nodes for q and v
/// are passed in so LoRA wrapping stays at the call site.
pub(crate) fn multi_head_attention(
    g: &mut Binder,
    x: NodeId,
    prefix: &str,
    num_heads: usize,
    wq: Option<NodeId>,
    wv: Option<NodeId>,
) -> Result<NodeId> {
    let d = crate::graph::view2(g.t.value(x)).ncols();
    let dh = d / num_heads;
    let q = linear(g, x, &format!("{prefix}.wq"), wq)?;
    let k = linear(g, x, &format!("{prefix}.wk"), None)?;
    let v = linear(g, x, &format!("{prefix}.wv"), wv)?;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.t.slice_cols(q, h * dh, dh);
        let kh = g.t.slice_cols(k, h * dh, dh);
        let vh = g.t.slice_cols(v, h * dh, dh);
        let kt = g.t.transpose(kh);
        let scores = g.t.matmul(qh, kt);
        let scores = g.t.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.t.softmax_rows(scores);
        heads.push(g.t.matmul(attn, vh));
    }
    let cat = g.t.concat_cols(&heads);
    linear(g, cat, &format!("{prefix}.wo"), None)
}

/// One pre-norm transformer block:
/// x' = x + Attn(LN1(x)); out = x' + MLP(LN2(x')).
pub(crate) fn transformer_block(
    g: &mut Binder,
    x: NodeId,
    prefix: &str,
    num_heads: usize,
    wq: Option<NodeId>,
    wv: Option<NodeId>,
) -> Result<NodeId> {
    let n1 = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let attn = multi_head_attention(g, n1, &format!("{prefix}.attn"), num_heads, wq, wv)?;
    let x = g.t.add(x, attn);
    let n2 = layer_norm(g, x, &format!("{prefix}.ln2"))?;
    let h = linear(g, n2, &format!("{prefix}.mlp.fc1"), None)?;
    let h = g.t.gelu(h);
    let h = linear(g, h, &format!("{prefix}.mlp.fc2"), None)?;
    Ok(g.t.add(x, h))
}

/// Tokenize: patches → linear embed → class token prepended → + positions.
pub fn patch_embed_node(g: &mut Binder, cfg: &EncoderConfig, image: NodeId) -> Result<NodeId> {
    let shape = g.t.value(image).shape().to_vec();
    let (h, w) = cfg.image_size;
    if shape != [cfg.in_channels, h, w] {
        return Err(Error::Config(format!(
            "image shape {shape:?} does not match configured {}x{h}x{w}",
            cfg.in_channels
        )));
    }
    let patches = g.t.extract_patches(image, cfg.patch_size);
    let tokens = linear(g, patches, "enc.patch_embed", None)?;
    let cls = g.p("enc.cls")?;
    let with_cls = g.t.concat_rows(cls, tokens);
    let pos = g.p("enc.pos")?;
    Ok(g.t.add(with_cls, pos))
}

/// Full encoder forward. Returns k+1 node ids: h_v^(0) (the embedded input)
/// followed by each block's output h_v^(1)..h_v^(k).
pub fn encoder_forward(g: &mut Binder, cfg: &EncoderConfig, image: NodeId) -> Result<Vec<NodeId>> {
    let mut features = Vec::with_capacity(cfg.num_blocks + 1);
    let mut x = patch_embed_node(g, cfg, image)?;
    features.push(x);
    for blk in 1..=cfg.num_blocks {
        let prefix = format!("enc.block{blk}");
        let wq = proj_weight(g, cfg, blk, LoraTarget::Query, &format!("{prefix}.attn.wq.w"))?;
        let wv = proj_weight(g, cfg, blk, LoraTarget::Value, &format!("{prefix}.attn.wv.w"))?;
        x = transformer_block(g, x, &prefix, cfg.num_heads, Some(wq), Some(wv))?;
        features.push(x);
    }
    Ok(features)
}

/// Value-level convenience: run the encoder on an image and return all
/// feature arrays h_v^(0)..h_v^(k).
pub fn encode_with_taps(
    store: &ParamStore,
    cfg: &EncoderConfig,
    image: &ndarray::Array3<f64>,
) -> Result<Vec<Array2<f64>>> {
    let mut g = Binder::new(store);
    let img = g.t.input(image.clone().into_dyn());
    let feats = encoder_forward(&mut g, cfg, img)?;
    Ok(feats
        .into_iter()
        .map(|id| crate::graph::view2(g.t.value(id)).to_owned())
        .collect())
}

/// Value-level patch embedding (tokens with class token and positions).
pub fn patch_embed(
    store: &ParamStore,
    cfg: &EncoderConfig,
    image: &ndarray::Array3<f64>,
) -> Result<Array2<f64>> {
    let mut g = Binder::new(store);
    let img = g.t.input(image.clone().into_dyn());
    let tokens = patch_embed_node(&mut g, cfg, img)?;
    Ok(crate::graph::view2(g.t.value(tokens)).to_owned())
}
