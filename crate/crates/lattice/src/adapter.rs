//! The attention adapter: a small transformer stack running beside the
//! encoder, fusing encoder intermediate features in a lattice pattern, and
//! emitting a spatial attention map plus auxiliary class probabilities.
//!
//! Structure:
//! - former part: patch-embed the image at the encoder's grid, add learned
//!   positions, then run `num_layers` transformer layers; before layer j
//!   (j = 1..num_taps) the encoder feature for `tap_blocks[j-1]` — class
//!   token dropped, passed through a per-tap linear projection — is added
//!   to the running tokens.
//! - f1: token grid → 3×3 conv (dim → dim/2) → ReLU → 3×3 conv (→ 1) →
//!   logistic squash, giving a token-grid attention map in [0,1]; the pixel
//!   map is its bilinear upsampling.
//! - f2: classifies the (gated) 1-channel attention grid via 3×3 conv →
//!   ReLU → 2×2 average pool → global average pool → fully connected →
//!   softmax. Because f2 sees only the attention map, its loss term pushes
//!   the map itself to be class-discriminative.
//! - epoch gate: odd epochs pass the attention map through; even epochs
//!   substitute an exact all-ones grid (and training freezes the adapter),
//!   which prevents the map from collapsing to a tiny region.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{transformer_block, EncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{view2, view3, NodeId};
use crate::params::{trunc_normal, zeros, Binder, ParamStore};

/// Tap projections start near zero so the untrained adapter is approximately
/// tap-free while keeping a live gradient path to the encoder features.
pub const TAP_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub dim: usize,
    /// Must equal the encoder's patch size so the grids align.
    pub patch_size: usize,
    pub num_taps: usize,
    /// Encoder feature indices (0 = the embedded input, i = block i output),
    /// strictly increasing, one per tapped adapter layer. Empty means
    /// "fill with the evenly spaced default" at config resolution.
    pub tap_blocks: Vec<usize>,
    pub mlp_ratio: usize,
    /// Hidden channel count of f1's first convolution (default dim/2).
    pub f1_hidden: usize,
    /// Channel count of f2's convolution.
    pub f2_channels: usize,
}

/// Desk-scale defaults matching the default encoder.
impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            num_layers: 2,
            num_heads: 2,
            dim: 16,
            patch_size: 4,
            num_taps: 2,
            tap_blocks: Vec::new(),
            mlp_ratio: 2,
            f1_hidden: 8,
            f2_channels: 8,
        }
    }
}

impl AdapterConfig {
    /// Evenly spaced tap defaults over {0..k}: floor(j·(k+1)/num_taps).
    pub fn default_tap_blocks(num_taps: usize, encoder_blocks: usize) -> Vec<usize> {
        (0..num_taps)
            .map(|j| j * (encoder_blocks + 1) / num_taps)
            .collect()
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        if self.num_layers == 0
            || self.num_heads == 0
            || self.dim == 0
            || self.mlp_ratio == 0
            || self.f1_hidden == 0
            || self.f2_channels == 0
        {
            return Err(Error::Config("adapter sizes must be positive".into()));
        }
        if self.patch_size != enc.patch_size {
            return Err(Error::Config(format!(
                "adapter patch size {} must match encoder patch size {}",
                self.patch_size, enc.patch_size
            )));
        }
        if self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "adapter dim {} not divisible by num_heads {}",
                self.dim, self.num_heads
            )));
        }
        if self.num_taps == 0 {
            return Err(Error::Config("num_taps must be positive".into()));
        }
        if self.num_taps > self.num_layers || self.num_taps > enc.num_blocks + 1 {
            return Err(Error::Config(format!(
                "num_taps {} must be ≤ adapter layers {} and ≤ encoder features {}",
                self.num_taps,
                self.num_layers,
                enc.num_blocks + 1
            )));
        }
        if self.tap_blocks.len() != self.num_taps {
            return Err(Error::Config(format!(
                "tap_blocks has {} entries, expected num_taps = {}",
                self.tap_blocks.len(),
                self.num_taps
            )));
        }
        if !self.tap_blocks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("tap_blocks must be strictly increasing".into()));
        }
        if let Some(&last) = self.tap_blocks.last() {
            if last > enc.num_blocks {
                return Err(Error::Config(format!(
                    "tap block {last} outside 0..={}",
                    enc.num_blocks
                )));
            }
        }
        Ok(())
    }
}

/// Spatial attention at both native resolutions.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// (h/P, w/P) grid in [0,1].
    pub token_grid: Array2<f64>,
    /// (h, w) bilinear upsampling of the grid, in [0,1].
    pub pixel_map: Array2<f64>,
}

impl AttentionMap {
    pub fn from_grid(token_grid: Array2<f64>, image_size: (usize, usize)) -> Self {
        let pixel_map = bilinear_upsample(&token_grid, image_size);
        AttentionMap { token_grid, pixel_map }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateState {
    PassAlpha,
    AllOnes,
}

impl std::fmt::Display for GateState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GateState::PassAlpha => write!(f, "PASS_ALPHA"),
            GateState::AllOnes => write!(f, "ALL_ONES"),
        }
    }
}

/// The attention grid after epoch gating.
#[derive(Debug, Clone)]
pub struct GatedAttention {
    pub h_ala: Array2<f64>,
    pub gate_state: GateState,
}

/// Epoch gate (epochs 1-indexed): odd passes the map, even substitutes
/// exact ones.
pub fn aea_gate(alpha: &AttentionMap, epoch: usize) -> GatedAttention {
    debug_assert!(epoch >= 1, "epochs are 1-indexed");
    if epoch % 2 == 1 {
        GatedAttention {
            h_ala: alpha.token_grid.clone(),
            gate_state: GateState::PassAlpha,
        }
    } else {
        GatedAttention {
            h_ala: Array2::from_elem(alpha.token_grid.dim(), 1.0),
            gate_state: GateState::AllOnes,
        }
    }
}

/// Bilinear upsampling with half-pixel centers and edge clamping.
pub fn bilinear_upsample(grid: &Array2<f64>, out_size: (usize, usize)) -> Array2<f64> {
    let (gh, gw) = grid.dim();
    let (oh, ow) = out_size;
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        let sy = (i as f64 + 0.5) * gh as f64 / oh as f64 - 0.5;
        let y0f = sy.floor();
        let ty = sy - y0f;
        let y0 = (y0f.max(0.0) as usize).min(gh - 1);
        let y1 = ((y0f + 1.0).max(0.0) as usize).min(gh - 1);
        for j in 0..ow {
            let sx = (j as f64 + 0.5) * gw as f64 / ow as f64 - 0.5;
            let x0f = sx.floor();
            let tx = sx - x0f;
            let x0 = (x0f.max(0.0) as usize).min(gw - 1);
            let x1 = ((x0f + 1.0).max(0.0) as usize).min(gw - 1);
            let top = grid[[y0, x0]] * (1.0 - tx) + grid[[y0, x1]] * tx;
            let bot = grid[[y1, x0]] * (1.0 - tx) + grid[[y1, x1]] * tx;
            out[[i, j]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Create all adapter parameters under `ala.`.
pub fn init_adapter<R: Rng>(
    store: &mut ParamStore,
    cfg: &AdapterConfig,
    enc: &EncoderConfig,
    num_classes: usize,
    rng: &mut R,
) {
    let d = cfg.dim;
    let patch_dim = enc.in_channels * cfg.patch_size * cfg.patch_size;
    store.insert("ala.patch_embed.w", trunc_normal(rng, &[patch_dim, d], INIT_STD));
    store.insert("ala.patch_embed.b", zeros(&[d]));
    store.insert("ala.pos", trunc_normal(rng, &[enc.num_patches(), d], INIT_STD));
    for j in 1..=cfg.num_taps {
        store.insert(
            &format!("ala.tap{j}.w"),
            trunc_normal(rng, &[enc.embed_dim, d], TAP_INIT_STD),
        );
        store.insert(&format!("ala.tap{j}.b"), zeros(&[d]));
    }
    for j in 1..=cfg.num_layers {
        let p = format!("ala.layer{j}");
        store.insert(&format!("{p}.ln1.gamma"), crate::params::ones(&[d]));
        store.insert(&format!("{p}.ln1.beta"), zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}.attn.{w}.w"), trunc_normal(rng, &[d, d], INIT_STD));
            store.insert(&format!("{p}.attn.{w}.b"), zeros(&[d]));
        }
        store.insert(&format!("{p}.ln2.gamma"), crate::params::ones(&[d]));
        store.insert(&format!("{p}.ln2.beta"), zeros(&[d]));
        store.insert(
            &format!("{p}.mlp.fc1.w"),
            trunc_normal(rng, &[d, cfg.mlp_ratio * d], INIT_STD),
        );
        store.insert(&format!("{p}.mlp.fc1.b"), zeros(&[cfg.mlp_ratio * d]));
        store.insert(
            &format!("{p}.mlp.fc2.w"),
            trunc_normal(rng, &[cfg.mlp_ratio * d, d], INIT_STD),
        );
        store.insert(&format!("{p}.mlp.fc2.b"), zeros(&[d]));
    }
    store.insert(
        "ala.f1.conv1.w",
        trunc_normal(rng, &[cfg.f1_hidden, d, 3, 3], INIT_STD),
    );
    store.insert("ala.f1.conv1.b", zeros(&[cfg.f1_hidden]));
    // Final attention conv starts at zero: the logistic then opens every
    // training run at a uniform 0.5 map instead of random speckle.
    store.insert("ala.f1.conv2.w", zeros(&[1, cfg.f1_hidden, 3, 3]));
    store.insert("ala.f1.conv2.b", zeros(&[1]));
    store.insert(
        "ala.f2.conv.w",
        trunc_normal(rng, &[cfg.f2_channels, 1, 3, 3], INIT_STD),
    );
    store.insert("ala.f2.conv.b", zeros(&[cfg.f2_channels]));
    store.insert(
        "ala.f2.fc.w",
        trunc_normal(rng, &[cfg.f2_channels, num_classes], INIT_STD),
    );
    store.insert("ala.f2.fc.b", zeros(&[num_classes]));
}

/// Names of all adapter-side parameters (former, taps, f1, f2).
pub fn adapter_param_names(store: &ParamStore) -> Vec<String> {
    store.names_with_prefix(&["ala."])
}

/// Former part on-tape. `taps` are the k+1 encoder feature nodes (class
/// token still attached); `inject` disables the lattice when false.
pub fn ala_former_nodes(
    g: &mut Binder,
    cfg: &AdapterConfig,
    enc: &EncoderConfig,
    image: NodeId,
    taps: &[NodeId],
    inject: bool,
) -> Result<NodeId> {
    if taps.len() != enc.num_blocks + 1 {
        return Err(Error::Config(format!(
            "expected {} encoder features, got {}",
            enc.num_blocks + 1,
            taps.len()
        )));
    }
    let n = enc.num_patches();
    let patches = g.t.extract_patches(image, cfg.patch_size);
    let w = g.p("ala.patch_embed.w")?;
    let b = g.p("ala.patch_embed.b")?;
    let x0 = g.t.matmul(patches, w);
    let x0 = g.t.add_row(x0, b);
    let pos = g.p("ala.pos")?;
    let mut x = g.t.add(x0, pos);
    for j in 1..=cfg.num_layers {
        if inject && j <= cfg.num_taps {
            let feat = taps[cfg.tap_blocks[j - 1]];
            let spatial = g.t.slice_rows(feat, 1, n);
            let tw = g.p(&format!("ala.tap{j}.w"))?;
            let tb = g.p(&format!("ala.tap{j}.b"))?;
            let proj = g.t.matmul(spatial, tw);
            let proj = g.t.add_row(proj, tb);
            x = g.t.add(x, proj);
        }
        x = transformer_block(g, x, &format!("ala.layer{j}"), cfg.num_heads, None, None)?;
    }
    Ok(x)
}

/// f1 on-tape: tokens → grid → conv stack → logistic. Returns the attention
/// grid as a (1, gh, gw) node.
pub fn ala_attention_nodes(
    g: &mut Binder,
    cfg: &AdapterConfig,
    grid: (usize, usize),
    h_l: NodeId,
) -> Result<NodeId> {
    let (gh, gw) = grid;
    let n = view2(g.t.value(h_l)).nrows();
    if n != gh * gw {
        return Err(Error::Internal(format!(
            "token count {n} does not fill a {gh}x{gw} grid"
        )));
    }
    let tt = g.t.transpose(h_l); // (d, n)
    let img = g.t.reshape(tt, &[cfg.dim, gh, gw]);
    let w1 = g.p("ala.f1.conv1.w")?;
    let b1 = g.p("ala.f1.conv1.b")?;
    let c1 = g.t.conv2d(img, w1, b1);
    let c1 = g.t.relu(c1);
    let w2 = g.p("ala.f1.conv2.w")?;
    let b2 = g.p("ala.f1.conv2.b")?;
    let c2 = g.t.conv2d(c1, w2, b2);
    Ok(g.t.sigmoid(c2))
}

/// f2 on-tape: (1, gh, gw) gated attention → conv → ReLU → 2×2 average pool
/// → global average pool → fully connected. Returns (logits, probs), each
/// shaped (1, C).
pub fn ala_classify_nodes(
    g: &mut Binder,
    cfg: &AdapterConfig,
    gated: NodeId,
) -> Result<(NodeId, NodeId)> {
    let w = g.p("ala.f2.conv.w")?;
    let b = g.p("ala.f2.conv.b")?;
    let c = g.t.conv2d(gated, w, b);
    let c = g.t.relu(c);
    let c = g.t.avg_pool2(c);
    let pooled = g.t.global_avg_pool(c);
    let flat = g.t.reshape(pooled, &[1, cfg.f2_channels]);
    let fw = g.p("ala.f2.fc.w")?;
    let fb = g.p("ala.f2.fc.b")?;
    let logits = g.t.matmul(flat, fw);
    let logits = g.t.add_row(logits, fb);
    let probs = g.t.softmax_rows(logits);
    Ok((logits, probs))
}

/// Value-level former: runs on explicitly supplied encoder features so
/// callers can probe the lattice wiring directly.
pub fn ala_former(
    store: &ParamStore,
    cfg: &AdapterConfig,
    enc: &EncoderConfig,
    image: &Array3<f64>,
    taps: &[Array2<f64>],
) -> Result<Array2<f64>> {
    let mut g = Binder::new(store);
    let img = g.t.input(image.clone().into_dyn());
    let tap_ids: Vec<NodeId> = taps
        .iter()
        .map(|f| g.t.input(f.clone().into_dyn()))
        .collect();
    let h_l = ala_former_nodes(&mut g, cfg, enc, img, &tap_ids, true)?;
    Ok(view2(g.t.value(h_l)).to_owned())
}

/// Value-level per-tap projection of a class-token-dropped feature.
pub fn tap_project(
    store: &ParamStore,
    tap_index: usize,
    feature: &Array2<f64>,
) -> Result<Array2<f64>> {
    let w = store.get(&format!("ala.tap{tap_index}.w"))?;
    let b = store.get(&format!("ala.tap{tap_index}.b"))?;
    let w2 = view2(w);
    let out = feature.dot(&w2);
    let bv = b.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    Ok(out + &bv)
}

/// Value-level f1: attention map (grid + upsampled pixels) from final tokens.
pub fn ala_attention(
    store: &ParamStore,
    cfg: &AdapterConfig,
    enc: &EncoderConfig,
    h_l: &Array2<f64>,
) -> Result<AttentionMap> {
    let mut g = Binder::new(store);
    let tokens = g.t.input(h_l.clone().into_dyn());
    let alpha = ala_attention_nodes(&mut g, cfg, enc.grid(), tokens)?;
    let a3 = view3(g.t.value(alpha));
    let grid = a3.index_axis(ndarray::Axis(0), 0).to_owned();
    Ok(AttentionMap::from_grid(grid, enc.image_size))
}

/// Value-level f2 on a gated attention grid.
pub fn ala_classify(
    store: &ParamStore,
    cfg: &AdapterConfig,
    gated: &GatedAttention,
) -> Result<ndarray::Array1<f64>> {
    let mut g = Binder::new(store);
    let (gh, gw) = gated.h_ala.dim();
    let flat: Vec<f64> = gated.h_ala.iter().copied().collect();
    let grid3 = Array3::from_shape_vec((1, gh, gw), flat).unwrap();
    let input = g.t.input(grid3.into_dyn());
    let (_, probs) = ala_classify_nodes(&mut g, cfg, input)?;
    Ok(view2(g.t.value(probs)).row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn enc_cfg() -> EncoderConfig {
        EncoderConfig {
            num_blocks: 3,
            embed_dim: 6,
            num_heads: 2,
            patch_size: 4,
            image_size: (8, 8),
            in_channels: 3,
            mlp_ratio: 2,
            lora: None,
        }
    }

    fn ada_cfg() -> AdapterConfig {
        AdapterConfig {
            num_layers: 2,
            num_heads: 2,
            dim: 4,
            patch_size: 4,
            num_taps: 2,
            tap_blocks: vec![0, 2],
            mlp_ratio: 2,
            f1_hidden: 2,
            f2_channels: 3,
        }
    }

    fn built(seed: u64) -> (ParamStore, AdapterConfig, EncoderConfig) {
        let enc = enc_cfg();
        let ada = ada_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::encoder::init_encoder(&mut store, &enc, &mut rng);
        init_adapter(&mut store, &ada, &enc, 4, &mut rng);
        (store, ada, enc)
    }

    fn rand_image(enc: &EncoderConfig, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((enc.in_channels, enc.image_size.0, enc.image_size.1), |_| {
            rng.random_range(0.0..1.0)
        })
    }

    fn rand_taps(enc: &EncoderConfig, seed: u64) -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..=enc.num_blocks)
            .map(|_| {
                Array2::from_shape_fn((enc.num_tokens(), enc.embed_dim), |_| {
                    rng.random_range(-1.0..1.0)
                })
            })
            .collect()
    }

    #[test]
    fn default_tap_blocks_span_encoder_depth() {
        assert_eq!(AdapterConfig::default_tap_blocks(4, 12), vec![0, 3, 6, 9]);
        assert_eq!(AdapterConfig::default_tap_blocks(4, 3), vec![0, 1, 2, 3]);
        assert_eq!(AdapterConfig::default_tap_blocks(2, 3), vec![0, 2]);
    }

    #[test]
    fn config_validation_catches_bad_taps() {
        let enc = enc_cfg();
        let mut a = ada_cfg();
        a.tap_blocks = vec![2, 0];
        assert!(a.validate(&enc).is_err());
        a = ada_cfg();
        a.num_taps = 3; // > num_layers = 2
        a.tap_blocks = vec![0, 1, 2];
        assert!(a.validate(&enc).is_err());
        a = ada_cfg();
        a.tap_blocks = vec![0, 4]; // 4 > k = 3
        assert!(a.validate(&enc).is_err());
        a = ada_cfg();
        a.patch_size = 2;
        assert!(a.validate(&enc).is_err());
        assert!(ada_cfg().validate(&enc).is_ok());
    }

    #[test]
    fn zero_adapter_weights_give_zero_tokens() {
        let (mut store, ada, enc) = built(1);
        let names: Vec<String> = store.names_with_prefix(&["ala."]);
        for n in names {
            let v = store.get_mut(&n).unwrap();
            *v = ndarray::ArrayD::zeros(v.raw_dim());
        }
        let h_l = ala_former(&store, &ada, &enc, &rand_image(&enc, 2), &rand_taps(&enc, 3)).unwrap();
        assert!(h_l.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lattice_wiring_reaches_tapped_features_only() {
        // Gradient of mean(h_l) w.r.t. each supplied encoder feature: the
        // tapped indices must receive gradient, untapped ones must not
        // (their only influence in the real model is through deeper encoder
        // blocks, which are held fixed here).
        let (store, ada, enc) = built(4);
        let image = rand_image(&enc, 5);
        let taps = rand_taps(&enc, 6);
        let mut g = Binder::new(&store);
        let img = g.t.input(image.into_dyn());
        let tap_ids: Vec<NodeId> = taps.iter().map(|f| g.t.input(f.clone().into_dyn())).collect();
        let h_l = ala_former_nodes(&mut g, &ada, &enc, img, &tap_ids, true).unwrap();
        let m = g.t.mean_all(h_l);
        let grads = g.t.backward(m).unwrap();
        for (i, id) in tap_ids.iter().enumerate() {
            let got = grads.get(*id);
            if ada.tap_blocks.contains(&i) {
                let g = got.expect("tapped feature must get gradient");
                assert!(g.iter().any(|&x| x != 0.0), "tap {i} gradient all zero");
            } else {
                assert!(got.is_none(), "untapped feature {i} received gradient");
            }
        }
    }

    #[test]
    fn taps_injected_only_into_leading_layers() {
        // Disabling injection must equal zeroing every tap projection:
        // taps touch the first num_taps layers and nothing else.
        let (mut store, ada, enc) = built(7);
        let image = rand_image(&enc, 8);
        let taps = rand_taps(&enc, 9);
        let mut g = Binder::new(&store);
        let img = g.t.input(image.clone().into_dyn());
        let tap_ids: Vec<NodeId> = taps.iter().map(|f| g.t.input(f.clone().into_dyn())).collect();
        let off = ala_former_nodes(&mut g, &ada, &enc, img, &tap_ids, false).unwrap();
        let off = view2(g.t.value(off)).to_owned();

        for j in 1..=ada.num_taps {
            for part in ["w", "b"] {
                let v = store.get_mut(&format!("ala.tap{j}.{part}")).unwrap();
                *v = ndarray::ArrayD::zeros(v.raw_dim());
            }
        }
        let zeroed = ala_former(&store, &ada, &enc, &image, &taps).unwrap();
        assert_eq!(off, zeroed);
    }

    #[test]
    fn former_matches_hand_computed_single_head_layer() {
        // 1-layer, single-head, dim-2 adapter over a 2-token input, against
        // an independent straight-line evaluation of the same block.
        let enc = EncoderConfig {
            num_blocks: 1,
            embed_dim: 2,
            num_heads: 1,
            patch_size: 2,
            image_size: (2, 4), // 1x2 grid → 2 tokens
            in_channels: 1,
            mlp_ratio: 2,
            lora: None,
        };
        let ada = AdapterConfig {
            num_layers: 1,
            num_heads: 1,
            dim: 2,
            patch_size: 2,
            num_taps: 1,
            tap_blocks: vec![0],
            mlp_ratio: 2,
            f1_hidden: 1,
            f2_channels: 1,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        crate::encoder::init_encoder(&mut store, &enc, &mut rng);
        init_adapter(&mut store, &ada, &enc, 2, &mut rng);
        let image = rand_image(&enc, 11);
        let taps = rand_taps(&enc, 12);
        let got = ala_former(&store, &ada, &enc, &image, &taps).unwrap();

        // Hand evaluation with plain loops.
        let m2 = |name: &str| view2(store.get(name).unwrap()).to_owned();
        let v1 = |name: &str| {
            store
                .get(name)
                .unwrap()
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned()
        };
        let gelu = |x: f64| {
            0.5 * x
                * (1.0
                    + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        let ln = |x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>| {
            let mut out = x.clone();
            for mut r in out.rows_mut() {
                let mu = r.sum() / 2.0;
                let var = r.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / 2.0;
                let inv = 1.0 / (var + 1e-6).sqrt();
                for (j, v) in r.iter_mut().enumerate() {
                    *v = (*v - mu) * inv * gamma[j] + beta[j];
                }
            }
            out
        };
        // patch embed: 2 patches of 1x2x2 → flattened rows, channel-major.
        let mut patches = Array2::<f64>::zeros((2, 4));
        for p in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    patches[[p, dy * 2 + dx]] = image[[0, dy, p * 2 + dx]];
                }
            }
        }
        let mut x = patches.dot(&m2("ala.patch_embed.w"));
        for mut r in x.rows_mut() {
            r += &v1("ala.patch_embed.b");
        }
        x = x + &m2("ala.pos");
        // tap 1 injects feature 0 without its class token.
        let spatial = taps[0].slice(ndarray::s![1.., ..]).to_owned();
        let mut proj = spatial.dot(&m2("ala.tap1.w"));
        for mut r in proj.rows_mut() {
            r += &v1("ala.tap1.b");
        }
        x = x + &proj;
        // block: x + attn(ln1(x)), then + mlp(ln2(·)).
        let n1 = ln(&x, &v1("ala.layer1.ln1.gamma"), &v1("ala.layer1.ln1.beta"));
        let lin = |x: &Array2<f64>, w: &str, b: &str| {
            let mut y = x.dot(&m2(w));
            for mut r in y.rows_mut() {
                r += &v1(b);
            }
            y
        };
        let q = lin(&n1, "ala.layer1.attn.wq.w", "ala.layer1.attn.wq.b");
        let k = lin(&n1, "ala.layer1.attn.wk.w", "ala.layer1.attn.wk.b");
        let v = lin(&n1, "ala.layer1.attn.wv.w", "ala.layer1.attn.wv.b");
        let mut scores = q.dot(&k.t()) / (2.0f64).sqrt();
        for mut r in scores.rows_mut() {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            r.mapv_inplace(|s| (s - mx).exp());
            let sum = r.sum();
            r.mapv_inplace(|s| s / sum);
        }
        let attn_out = lin(&scores.dot(&v), "ala.layer1.attn.wo.w", "ala.layer1.attn.wo.b");
        let x1 = x + &attn_out;
        let n2 = ln(&x1, &v1("ala.layer1.ln2.gamma"), &v1("ala.layer1.ln2.beta"));
        let h = lin(&n2, "ala.layer1.mlp.fc1.w", "ala.layer1.mlp.fc1.b").mapv(gelu);
        let out = lin(&h, "ala.layer1.mlp.fc2.w", "ala.layer1.mlp.fc2.b");
        let want = x1 + &out;

        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_map_stays_in_unit_interval() {
        let (mut store, ada, enc) = built(13);
        // Exaggerate f1 weights to push the logistic toward its tails.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for n in ["ala.f1.conv1.w", "ala.f1.conv2.w"] {
            let v = store.get_mut(n).unwrap();
            *v = ndarray::ArrayD::from_shape_fn(v.raw_dim(), |_| rng.random_range(-30.0..30.0));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h_l = Array2::from_shape_fn((enc.num_patches(), ada.dim), |_| {
            rng.random_range(-5.0..5.0)
        });
        let map = ala_attention(&store, &ada, &enc, &h_l).unwrap();
        assert!(map.token_grid.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(map.pixel_map.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert_eq!(map.pixel_map.dim(), enc.image_size);
    }

    #[test]
    fn zero_f1_maps_to_exactly_half() {
        let (mut store, ada, enc) = built(16);
        for n in ["ala.f1.conv1.w", "ala.f1.conv1.b", "ala.f1.conv2.w", "ala.f1.conv2.b"] {
            let v = store.get_mut(n).unwrap();
            *v = ndarray::ArrayD::zeros(v.raw_dim());
        }
        let h_l = Array2::from_elem((enc.num_patches(), ada.dim), 3.7);
        let map = ala_attention(&store, &ada, &enc, &h_l).unwrap();
        assert!(map.token_grid.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn bilinear_upsample_matches_hand_stencil() {
        let grid = arr2(&[[0.0, 1.0], [0.0, 1.0]]);
        let up = bilinear_upsample(&grid, (4, 4));
        let want_row = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((up[[i, j]] - want_row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_values_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = Array2::from_shape_fn((3, 5), |_| rng.random_range(0.0..1.0));
        let up = bilinear_upsample(&grid, (17, 23));
        let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(up.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn aea_gate_follows_epoch_parity() {
        let alpha = AttentionMap::from_grid(arr2(&[[0.3, 0.9], [0.1, 0.6]]), (4, 4));
        for odd in [1, 3, 9] {
            let gated = aea_gate(&alpha, odd);
            assert_eq!(gated.gate_state, GateState::PassAlpha);
            assert_eq!(gated.h_ala, alpha.token_grid);
        }
        for even in [2, 4, 10] {
            let gated = aea_gate(&alpha, even);
            assert_eq!(gated.gate_state, GateState::AllOnes);
            assert!(gated.h_ala.iter().all(|v| v.to_bits() == 1.0f64.to_bits()));
        }
    }

    #[test]
    fn classify_returns_simplex_and_ignores_image_under_ones() {
        let (store, ada, _enc) = built(18);
        let ones = GatedAttention {
            h_ala: Array2::from_elem((2, 2), 1.0),
            gate_state: GateState::AllOnes,
        };
        let p1 = ala_classify(&store, &ada, &ones).unwrap();
        let p2 = ala_classify(&store, &ada, &ones).unwrap();
        assert_eq!(p1, p2);
        assert!((p1.sum() - 1.0).abs() < 1e-6);
        assert!(p1.iter().all(|&p| p >= 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let varied = GatedAttention {
            h_ala: Array2::from_shape_fn((2, 2), |_| rng.random_range(0.0..1.0)),
            gate_state: GateState::PassAlpha,
        };
        let p3 = ala_classify(&store, &ada, &varied).unwrap();
        assert!((p3.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn tap_project_matches_naive_loops_and_identity() {
        let (store, _, enc) = built(20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let feat = Array2::from_shape_fn((3, enc.embed_dim), |_| rng.random_range(-1.0..1.0));
        let got = tap_project(&store, 1, &feat).unwrap();
        let w = view2(store.get("ala.tap1.w").unwrap()).to_owned();
        for t in 0..3 {
            for j in 0..w.ncols() {
                let mut acc = 0.0;
                for i in 0..enc.embed_dim {
                    acc += feat[[t, i]] * w[[i, j]];
                }
                assert!((got[[t, j]] - acc).abs() < 1e-12);
            }
        }

        // Identity projection passes features through untouched.
        let mut store2 = ParamStore::new();
        store2.insert("ala.tap1.w", Array2::<f64>::eye(4).into_dyn());
        store2.insert("ala.tap1.b", crate::params::zeros(&[4]));
        let f4 = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        assert_eq!(tap_project(&store2, 1, &f4).unwrap(), f4);
        let mut store3 = ParamStore::new();
        store3.insert("ala.tap1.w", crate::params::zeros(&[4, 4]));
        store3.insert("ala.tap1.b", crate::params::zeros(&[4]));
        assert!(tap_project(&store3, 1, &f4).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn f1_f2_gradients_match_finite_differences() {
        // Composition check over the attention head and auxiliary
        // classifier: probe d(prob of class 1)/d(param) for a sample of
        // f1/f2 parameters against central differences.
        let (mut store, ada, enc) = built(22);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // Random conv2 so the f1 path carries signal (init is zero).
        for n in ["ala.f1.conv2.w", "ala.f1.conv2.b"] {
            let v = store.get_mut(n).unwrap();
            *v = ndarray::ArrayD::from_shape_fn(v.raw_dim(), |_| rng.random_range(-0.5..0.5));
        }
        let h_l = Array2::from_shape_fn((enc.num_patches(), ada.dim), |_| {
            rng.random_range(-1.0..1.0)
        });

        let probe = |store: &ParamStore| -> f64 {
            let mut g = Binder::new(store);
            let tokens = g.t.input(h_l.clone().into_dyn());
            let alpha = ala_attention_nodes(&mut g, &ada, enc.grid(), tokens).unwrap();
            let (_, probs) = ala_classify_nodes(&mut g, &ada, alpha).unwrap();
            let p = g.t.pick(probs, 0, 1);
            g.t.scalar(p)
        };

        let mut g = Binder::new(&store);
        let tokens = g.t.input(h_l.clone().into_dyn());
        let alpha = ala_attention_nodes(&mut g, &ada, enc.grid(), tokens).unwrap();
        let (_, probs) = ala_classify_nodes(&mut g, &ada, alpha).unwrap();
        let p = g.t.pick(probs, 0, 1);
        let grads = g.t.backward(p).unwrap();
        let pg = g.t.param_grads(&grads);

        let eps = 1e-5;
        let names = ["ala.f1.conv1.w", "ala.f1.conv2.w", "ala.f2.conv.w", "ala.f2.fc.w"];
        for name in names {
            let analytic = pg.get(name).unwrap().clone();
            for _ in 0..4 {
                let idx = rng.random_range(0..analytic.len());
                let orig = store.get(name).unwrap().as_slice().unwrap()[idx];
                store.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig + eps;
                let up = probe(&store);
                store.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig - eps;
                let down = probe(&store);
                store.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = orig;
                let num = (up - down) / (2.0 * eps);
                let ana = analytic.as_slice().unwrap()[idx];
                assert!(
                    crate::graph::fd_agrees(ana, num, 1e-4),
                    "{name}[{idx}]: analytic {ana} vs numeric {num}"
                );
            }
        }
    }
}
