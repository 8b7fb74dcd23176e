//! Perception branch: the final classifier.
//!
//! Consumes the encoder's last feature map h_v^(k) (class token dropped,
//! patch tokens reshaped to the grid), modulates each spatial cell by the
//! gated attention value — one scalar per cell multiplying all channels —
//! and classifies the result with 3×3 conv → ReLU → 2×2 average pool →
//! global average pool → fully connected → softmax.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::adapter::GatedAttention;
use crate::encoder::{EncoderConfig, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::{view2, NodeId};
use crate::params::{trunc_normal, zeros, Binder, ParamStore};

#[derive(Debug, Clone)]
pub struct Prediction {
    pub probs: Array1<f64>,
    pub logits: Array1<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Create perception-branch parameters under `pb.`.
pub fn init_perception<R: Rng>(
    store: &mut ParamStore,
    enc: &EncoderConfig,
    num_classes: usize,
    rng: &mut R,
) {
    let d = enc.embed_dim;
    store.insert("pb.conv.w", trunc_normal(rng, &[d, d, 3, 3], INIT_STD));
    store.insert("pb.conv.b", zeros(&[d]));
    store.insert("pb.fc.w", trunc_normal(rng, &[d, num_classes], INIT_STD));
    store.insert("pb.fc.b", zeros(&[num_classes]));
}

pub fn perception_param_names(store: &ParamStore) -> Vec<String> {
    store.names_with_prefix(&["pb."])
}

/// Node handles out of the perception branch forward.
pub struct PerceptionNodes {
    /// (d, gh, gw) activation after conv + ReLU, before pooling — the
    /// target layer for gradient-weighted saliency.
    pub prepool: NodeId,
    /// (1, C)
    pub logits: NodeId,
    /// (1, C)
    pub probs: NodeId,
}

/// Perception branch on-tape. `gate` is an (n, 1) column of attention
/// values aligned with the patch-token rows, or `None` for the unmodulated
/// branch (used to witness that an all-ones gate is an exact identity).
pub fn pb_forward_nodes(
    g: &mut Binder,
    enc: &EncoderConfig,
    h_v_k: NodeId,
    gate: Option<NodeId>,
) -> Result<PerceptionNodes> {
    let (gh, gw) = enc.grid();
    let n = enc.num_patches();
    let rows = view2(g.t.value(h_v_k)).nrows();
    if rows != n + 1 {
        return Err(Error::Internal(format!(
            "expected {} tokens (patches + class), got {rows}",
            n + 1
        )));
    }
    let tokens = g.t.slice_rows(h_v_k, 1, n);
    let modulated = match gate {
        Some(col) => g.t.scale_rows(tokens, col),
        None => tokens,
    };
    let tt = g.t.transpose(modulated);
    let grid = g.t.reshape(tt, &[enc.embed_dim, gh, gw]);
    let w = g.p("pb.conv.w")?;
    let b = g.p("pb.conv.b")?;
    let c = g.t.conv2d(grid, w, b);
    let prepool = g.t.relu(c);
    let pooled = g.t.avg_pool2(prepool);
    let gap = g.t.global_avg_pool(pooled);
    let flat = g.t.reshape(gap, &[1, enc.embed_dim]);
    let fw = g.p("pb.fc.w")?;
    let fb = g.p("pb.fc.b")?;
    let logits = g.t.matmul(flat, fw);
    let logits = g.t.add_row(logits, fb);
    let probs = g.t.softmax_rows(logits);
    Ok(PerceptionNodes { prepool, logits, probs })
}

/// Flatten a (gh, gw) attention grid into the (n, 1) token-aligned column.
pub fn gate_column(h_ala: &Array2<f64>) -> Array2<f64> {
    let n = h_ala.len();
    let flat: Vec<f64> = h_ala.iter().copied().collect();
    Array2::from_shape_vec((n, 1), flat).unwrap()
}

/// Value-level forward on explicit features and gate.
pub fn pb_forward(
    store: &ParamStore,
    enc: &EncoderConfig,
    h_v_k: &Array2<f64>,
    gated: &GatedAttention,
) -> Result<Prediction> {
    if gated.h_ala.dim() != enc.grid() {
        return Err(Error::Internal(format!(
            "gate grid {:?} does not match encoder grid {:?}",
            gated.h_ala.dim(),
            enc.grid()
        )));
    }
    let mut g = Binder::new(store);
    let tokens = g.t.input(h_v_k.clone().into_dyn());
    let col = g.t.input(gate_column(&gated.h_ala).into_dyn());
    let nodes = pb_forward_nodes(&mut g, enc, tokens, Some(col))?;
    Ok(Prediction {
        probs: view2(g.t.value(nodes.probs)).row(0).to_owned(),
        logits: view2(g.t.value(nodes.logits)).row(0).to_owned(),
    })
}

/// Value-level forward with no modulation at all (no gate op on the tape).
pub fn pb_forward_unmodulated(
    store: &ParamStore,
    enc: &EncoderConfig,
    h_v_k: &Array2<f64>,
) -> Result<Prediction> {
    let mut g = Binder::new(store);
    let tokens = g.t.input(h_v_k.clone().into_dyn());
    let nodes = pb_forward_nodes(&mut g, enc, tokens, None)?;
    Ok(Prediction {
        probs: view2(g.t.value(nodes.probs)).row(0).to_owned(),
        logits: view2(g.t.value(nodes.logits)).row(0).to_owned(),
    })
}
