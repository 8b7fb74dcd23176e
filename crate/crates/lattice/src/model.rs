//! Full-model composition: encoder (with optional LoRA), attention adapter
//! (former + f1 + f2), epoch gate, and perception branch, all sharing one
//! parameter store and, during training, one gradient tape per batch.
//!
//! Forward data flow for one image:
//!
//! ```text
//! image ─► encoder ──────────────h_v^(k)──────────────► ⊙ ─► f_PB ─► p_PB
//!    │        │ h_v^(0..k) taps                         ▲
//!    └─► adapter former ─► f1 ─► α ─► epoch gate ─► h_ALA
//!                                          │
//!                                          └─► f2 ─► p_ALA
//! ```
//!
//! Odd epochs pass α through the gate; even epochs substitute exact ones,
//! which simultaneously makes the perception branch see unmodulated
//! features and starves the f2 loss term of gradients.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    ala_attention_nodes, ala_classify_nodes, ala_former_nodes, init_adapter, AdapterConfig,
    AttentionMap, GateState,
};
use crate::encoder::{encoder_forward, init_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{view2, view3, GradMap, NodeId};
use crate::params::{Binder, ParamStore};
use crate::perception::{init_perception, pb_forward_nodes, PerceptionNodes, Prediction};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub num_classes: usize,
    /// Structural ablation: when false the adapter runs tap-free (the
    /// lattice injection is skipped and tap projections never train).
    pub inject_taps: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate(&self.encoder)?;
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

/// Node handles for one sample's forward pass.
pub struct ForwardNodes {
    pub image: NodeId,
    /// h_v^(0)..h_v^(k)
    pub features: Vec<NodeId>,
    pub h_l: NodeId,
    /// Raw attention (1, gh, gw), pre-gate.
    pub alpha: NodeId,
    /// Post-gate (1, gh, gw): alpha itself or an exact-ones leaf.
    pub gated: NodeId,
    pub ala_logits: NodeId,
    pub ala_probs: NodeId,
    pub pb: PerceptionNodes,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_encoder(&mut store, &cfg.encoder, &mut rng);
        init_adapter(&mut store, &cfg.adapter, &cfg.encoder, cfg.num_classes, &mut rng);
        init_perception(&mut store, &cfg.encoder, cfg.num_classes, &mut rng);
        Ok(Model { cfg, store })
    }

    pub fn from_parts(cfg: ModelConfig, store: ParamStore) -> Result<Model> {
        cfg.validate()?;
        Ok(Model { cfg, store })
    }

    /// Build the full forward graph for one image node.
    pub fn forward_nodes(
        &self,
        g: &mut Binder,
        image: NodeId,
        gate: GateState,
    ) -> Result<ForwardNodes> {
        let enc = &self.cfg.encoder;
        let ada = &self.cfg.adapter;
        let features = encoder_forward(g, enc, image)?;
        let h_l = ala_former_nodes(g, ada, enc, image, &features, self.cfg.inject_taps)?;
        let alpha = ala_attention_nodes(g, ada, enc.grid(), h_l)?;
        let gated = match gate {
            GateState::PassAlpha => alpha,
            GateState::AllOnes => {
                let (gh, gw) = enc.grid();
                g.t.input(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, gh, gw]), 1.0))
            }
        };
        let (ala_logits, ala_probs) = ala_classify_nodes(g, ada, gated)?;
        let gate_col = g.t.reshape(gated, &[enc.num_patches(), 1]);
        let pb = pb_forward_nodes(g, enc, *features.last().unwrap(), Some(gate_col))?;
        Ok(ForwardNodes {
            image,
            features,
            h_l,
            alpha,
            gated,
            ala_logits,
            ala_probs,
            pb,
        })
    }

    /// Per-sample joint loss node: CE from logits via log-softmax for both
    /// branches, combined as CE_PB + λ·CE_ALA.
    pub fn loss_nodes(
        &self,
        g: &mut Binder,
        fwd: &ForwardNodes,
        label: usize,
        lambda: f64,
    ) -> Result<NodeId> {
        if label >= self.cfg.num_classes {
            return Err(Error::Input(format!(
                "label {label} outside 0..{}",
                self.cfg.num_classes
            )));
        }
        let pb_ls = g.t.log_softmax_rows(fwd.pb.logits);
        let pb_pick = g.t.pick(pb_ls, 0, label);
        let pb_ce = g.t.scale(pb_pick, -1.0);
        if lambda == 0.0 {
            return Ok(pb_ce);
        }
        let ala_ls = g.t.log_softmax_rows(fwd.ala_logits);
        let ala_pick = g.t.pick(ala_ls, 0, label);
        let ala_ce = g.t.scale(ala_pick, -lambda);
        Ok(g.t.add(pb_ce, ala_ce))
    }

    /// Mean joint loss over a batch plus gradients for every parameter the
    /// sweep reaches. One tape serves the whole batch.
    pub fn batch_loss_and_grads(
        &self,
        batch: &[(Array3<f64>, usize)],
        gate: GateState,
        lambda: f64,
    ) -> Result<(f64, GradMap)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut g = Binder::new(&self.store);
        let mut total: Option<NodeId> = None;
        for (image, label) in batch {
            let img = g.t.input(image.clone().into_dyn());
            let fwd = self.forward_nodes(&mut g, img, gate)?;
            let loss = self.loss_nodes(&mut g, &fwd, *label, lambda)?;
            total = Some(match total {
                None => loss,
                Some(t) => g.t.add(t, loss),
            });
        }
        let sum = total.unwrap();
        let mean = g.t.scale(sum, 1.0 / batch.len() as f64);
        let loss_value = g.t.scalar(mean);
        let grads = g.t.backward(mean)?;
        Ok((loss_value, g.t.param_grads(&grads)))
    }

    /// Inference: both branch predictions and the attention map, one tape.
    pub fn infer(&self, image: &Array3<f64>) -> Result<Inference> {
        let mut g = Binder::new(&self.store);
        let img = g.t.input(image.clone().into_dyn());
        let fwd = self.forward_nodes(&mut g, img, GateState::PassAlpha)?;
        let grid = view3(g.t.value(fwd.alpha)).index_axis(ndarray::Axis(0), 0).to_owned();
        Ok(Inference {
            pb: Prediction {
                probs: view2(g.t.value(fwd.pb.probs)).row(0).to_owned(),
                logits: view2(g.t.value(fwd.pb.logits)).row(0).to_owned(),
            },
            ala: Prediction {
                probs: view2(g.t.value(fwd.ala_probs)).row(0).to_owned(),
                logits: view2(g.t.value(fwd.ala_logits)).row(0).to_owned(),
            },
            attention: AttentionMap::from_grid(grid, self.cfg.encoder.image_size),
        })
    }

    /// Perception-branch prediction on an image (the deployed classifier).
    pub fn predict(&self, image: &Array3<f64>) -> Result<Prediction> {
        Ok(self.infer(image)?.pb)
    }

    /// Attention map for an image.
    pub fn attention(&self, image: &Array3<f64>) -> Result<AttentionMap> {
        Ok(self.infer(image)?.attention)
    }

    /// Class probability and its gradient w.r.t. the input image
    /// (input-attribution saliency).
    pub fn class_prob_and_input_grad(
        &self,
        image: &Array3<f64>,
        class: usize,
    ) -> Result<(f64, Array3<f64>)> {
        if class >= self.cfg.num_classes {
            return Err(Error::Input(format!("class {class} out of range")));
        }
        let mut g = Binder::new(&self.store);
        let img = g.t.input(image.clone().into_dyn());
        let fwd = self.forward_nodes(&mut g, img, GateState::PassAlpha)?;
        let p = g.t.pick(fwd.pb.probs, 0, class);
        let value = g.t.scalar(p);
        let grads = g.t.backward(p)?;
        let gi = grads
            .get(img)
            .cloned()
            .unwrap_or_else(|| ndarray::ArrayD::zeros(g.t.value(img).raw_dim()));
        Ok((value, gi.into_dimensionality::<ndarray::Ix3>().unwrap()))
    }

    /// Pre-pooling perception activation and the class-logit gradient at it
    /// (gradient-weighted class activation mapping).
    pub fn pb_prepool_and_grad(
        &self,
        image: &Array3<f64>,
        class: usize,
    ) -> Result<(Array3<f64>, Array3<f64>)> {
        if class >= self.cfg.num_classes {
            return Err(Error::Input(format!("class {class} out of range")));
        }
        let mut g = Binder::new(&self.store);
        let img = g.t.input(image.clone().into_dyn());
        let fwd = self.forward_nodes(&mut g, img, GateState::PassAlpha)?;
        let logit = g.t.pick(fwd.pb.logits, 0, class);
        let grads = g.t.backward(logit)?;
        let act = view3(g.t.value(fwd.pb.prepool)).to_owned();
        let grad = grads
            .get(fwd.pb.prepool)
            .cloned()
            .unwrap_or_else(|| ndarray::ArrayD::zeros(g.t.value(fwd.pb.prepool).raw_dim()));
        Ok((act, grad.into_dimensionality::<ndarray::Ix3>().unwrap()))
    }

    /// Validation-time joint loss of one sample under the deployed
    /// (PASS_ALPHA) model.
    pub fn sample_loss(&self, image: &Array3<f64>, label: usize, lambda: f64) -> Result<f64> {
        let mut g = Binder::new(&self.store);
        let img = g.t.input(image.clone().into_dyn());
        let fwd = self.forward_nodes(&mut g, img, GateState::PassAlpha)?;
        let loss = self.loss_nodes(&mut g, &fwd, label, lambda)?;
        Ok(g.t.scalar(loss))
    }

    /// Names the optimizer may update for a given epoch:
    /// perception branch always; LoRA factors always (when present);
    /// adapter (former, f1, f2) except on frozen epochs; tap projections
    /// only when the lattice is active.
    pub fn trainable_names(&self, ala_frozen: bool) -> Vec<String> {
        let mut names = self.store.names_with_prefix(&["pb.", "lora."]);
        if !ala_frozen {
            let ala = self.store.names_with_prefix(&["ala."]);
            names.extend(ala.into_iter().filter(|n| {
                self.cfg.inject_taps || !n.starts_with("ala.tap")
            }));
        }
        names.sort();
        names
    }

    /// All adapter-side parameter names (the set frozen on even epochs).
    pub fn ala_names(&self) -> Vec<String> {
        self.store.names_with_prefix(&["ala."])
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}

pub struct Inference {
    pub pb: Prediction,
    pub ala: Prediction,
    pub attention: AttentionMap,
}

/// Gate column helper shared with tests: grid flattened row-major.
pub fn grid_to_column(grid: &Array2<f64>) -> Array2<f64> {
    crate::perception::gate_column(grid)
}
