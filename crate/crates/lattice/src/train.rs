//! Training loop: alternating-epoch gate schedule, joint two-branch loss,
//! light geometric augmentation, AdamW over the trainable subset, and
//! early stopping on validation loss with best-weight restore.
//!
//! Epoch numbering is 1-based. Odd epochs run the attention branch live
//! (gate passes the attention map, attention parameters train); even
//! epochs clamp the gate to exact ones and freeze the attention branch,
//! so the perception branch also learns to stand on unmodulated features.
//! Freezing is optimizer exclusion: frozen parameters receive no update
//! and no weight decay, and their optimizer moments are untouched.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{bilinear_upsample, GateState};
use crate::data::{resize_mask, ImageSample};
use crate::encoder::{encoder_forward, INIT_STD};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::model::Model;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{trunc_normal, zeros, Binder, ParamStore};

/// Fraction of image area kept by the random crop.
pub const CROP_AREA: f64 = 0.875;
/// Probability floor used when taking the log of a predicted probability.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: true, crop: true }
    }
}

/// Component toggles for ablation runs. All true is the full method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Inject encoder features into the attention branch.
    pub use_taps: bool,
    /// Adapt the frozen encoder with low-rank updates.
    pub use_lora: bool,
    /// Alternate the gate between epochs (false: gate always live).
    pub use_aea: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { use_taps: true, use_lora: true, use_aea: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Weight of the attention-branch classification loss.
    pub lambda: f64,
    /// Supervised warmup epochs for the encoder base before it freezes:
    /// the encoder trains end-to-end with a throwaway linear head, the
    /// head is discarded, and the result is the frozen base the low-rank
    /// factors and the attention branch then specialize. 0 disables the
    /// warmup and freezes the random initialization instead.
    pub pretrain_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            lambda: 1.0,
            pretrain_epochs: 0,
            patience: 5,
            augment: AugmentConfig::default(),
            seed: 42,
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }
}

/// What one epoch does with the gate and the attention parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub gate: GateState,
    pub ala_frozen: bool,
}

/// Odd epochs pass the attention map and train the attention branch; even
/// epochs clamp the gate to ones and freeze it. Without alternation every
/// epoch behaves like an odd one.
pub fn make_epoch_plan(epoch: usize, use_aea: bool) -> EpochPlan {
    let even = use_aea && epoch % 2 == 0;
    EpochPlan {
        epoch,
        gate: if even { GateState::AllOnes } else { GateState::PassAlpha },
        ala_frozen: even,
    }
}

/// −log p_pb(label) − λ·log p_ala(label), with probabilities floored at
/// `PROB_FLOOR` before the log so a collapsed prediction yields a large
/// finite loss instead of infinity.
pub fn joint_loss(pb_probs: &[f64], ala_probs: &[f64], label: usize, lambda: f64) -> f64 {
    let take = |probs: &[f64], branch: &str| -> f64 {
        let p = probs[label];
        if p < PROB_FLOOR {
            log::warn!("{branch} probability {p:.3e} for class {label} floored at {PROB_FLOOR:.0e}");
        }
        p.max(PROB_FLOOR)
    };
    let mut loss = -take(pb_probs, "perception").ln();
    if lambda != 0.0 {
        loss -= lambda * take(ala_probs, "attention").ln();
    }
    loss
}

fn flip_image(image: &Array3<f64>) -> Array3<f64> {
    let mut out = image.clone();
    out.invert_axis(ndarray::Axis(2));
    out
}

/// Random horizontal flip and random area-preserving crop, applied with
/// identical geometry to the image and its mask so they stay aligned.
/// Draw order from `rng` is fixed: flip coin first, then crop offsets.
pub fn augment_sample(sample: &ImageSample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> ImageSample {
    let mut out = sample.clone();
    if cfg.flip && rng.random_bool(0.5) {
        out.image = flip_image(&out.image);
        if let Some(m) = &mut out.mask {
            m.invert_axis(ndarray::Axis(1));
        }
    }
    if cfg.crop {
        let (c, h, w) = out.image.dim();
        let side_h = ((h as f64) * CROP_AREA.sqrt()).round().max(1.0) as usize;
        let side_w = ((w as f64) * CROP_AREA.sqrt()).round().max(1.0) as usize;
        let oy = rng.random_range(0..=h - side_h);
        let ox = rng.random_range(0..=w - side_w);
        let mut resized = Array3::<f64>::zeros((c, h, w));
        for ch in 0..c {
            let plane = out
                .image
                .slice(ndarray::s![ch, oy..oy + side_h, ox..ox + side_w])
                .to_owned();
            resized
                .index_axis_mut(ndarray::Axis(0), ch)
                .assign(&bilinear_upsample(&plane, (h, w)));
        }
        out.image = resized;
        if let Some(m) = &out.mask {
            let crop = m.slice(ndarray::s![oy..oy + side_h, ox..ox + side_w]).to_owned();
            out.mask = Some(resize_mask(&crop, (h, w)));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gate: String,
    pub ala_frozen: bool,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub params_checksum: String,
    /// Checksum over the attention-branch (`ala.`) arrays alone, so frozen
    /// epochs can be audited after the fact.
    pub ala_checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Last epoch that actually ran.
    pub stopping_epoch: usize,
    /// Checksum after restoring the best weights.
    pub final_checksum: String,
}

/// Mean validation loss (gate live) and argmax accuracy of the perception
/// branch.
pub fn evaluate_loss(model: &Model, samples: &[ImageSample], lambda: f64) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for s in samples {
        loss_sum += model.sample_loss(&s.image, s.label, lambda)?;
        if model.predict(&s.image)?.argmax() == s.label {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    Ok((loss_sum / n, correct as f64 / n))
}

/// Rng stream id for the warmup, disjoint from the per-epoch streams of
/// the main loop (which use the epoch number directly).
const WARMUP_STREAM: u64 = 1 << 32;

/// Supervised encoder warmup: every `enc.` parameter trains end-to-end
/// with a throwaway linear head on the final class token, after which the
/// head is removed. The adapter, low-rank factors, and perception branch
/// are untouched, so the main loop freezes a task-informed base exactly
/// as it would a random one.
pub fn pretrain_encoder(
    model: &mut Model,
    train: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<()> {
    if cfg.pretrain_epochs == 0 {
        return Ok(());
    }
    let enc = model.cfg.encoder.clone();
    let classes = model.cfg.num_classes;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(WARMUP_STREAM);
    model.store.insert(
        "pretrain.head.w",
        trunc_normal(&mut init_rng, &[enc.embed_dim, classes], INIT_STD),
    );
    model.store.insert("pretrain.head.b", zeros(&[classes]));
    let trainable = model.store.names_with_prefix(&["enc.", "pretrain."]);

    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });

    for epoch in 1..=cfg.pretrain_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(WARMUP_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Array3<f64>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let s = augment_sample(&train[i], &cfg.augment, &mut rng);
                    (s.image, s.label)
                })
                .collect();
            let mut g = Binder::new(&model.store);
            let mut total: Option<NodeId> = None;
            for (image, label) in &batch {
                let img = g.t.input(image.clone().into_dyn());
                let feats = encoder_forward(&mut g, &enc, img)?;
                let cls = g.t.slice_rows(*feats.last().unwrap(), 0, 1);
                let w = g.p("pretrain.head.w")?;
                let b = g.p("pretrain.head.b")?;
                let logits = g.t.matmul(cls, w);
                let logits = g.t.add_row(logits, b);
                let ls = g.t.log_softmax_rows(logits);
                let pick = g.t.pick(ls, 0, *label);
                let ce = g.t.scale(pick, -1.0);
                total = Some(match total {
                    None => ce,
                    Some(t) => g.t.add(t, ce),
                });
            }
            let mean = g.t.scale(total.unwrap(), 1.0 / batch.len() as f64);
            let loss = g.t.scalar(mean);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite warmup loss {loss} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            let grads = g.t.backward(mean)?;
            let grads = g.t.param_grads(&grads);
            drop(g);
            opt.step(&mut model.store, &trainable, &grads)?;
        }
        log::info!("warmup epoch {epoch}: loss={:.6}", loss_sum / train.len() as f64);
    }
    model.store.remove("pretrain.head.w");
    model.store.remove("pretrain.head.b");
    Ok(())
}

/// Train in place. On return the model holds the weights of the best
/// validation epoch. A non-finite loss aborts with a numeric error; the
/// caller still owns the model and can snapshot it for diagnosis.
pub fn fit(
    model: &mut Model,
    train: &[ImageSample],
    val: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainingReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be non-empty".into()));
    }
    for s in train.iter().chain(val) {
        if s.label >= model.cfg.num_classes {
            return Err(Error::Input(format!(
                "label {} of {} exceeds num_classes {}",
                s.label, s.sample_id, model.cfg.num_classes
            )));
        }
    }

    pretrain_encoder(model, train, cfg)?;

    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });

    let mut epochs = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0usize;
    let mut stopping_epoch = 0usize;

    for epoch in 1..=cfg.max_epochs {
        stopping_epoch = epoch;
        let plan = make_epoch_plan(epoch, cfg.ablation.use_aea);
        let trainable = model.trainable_names(plan.ala_frozen);

        // One independent, reproducible stream per epoch: reordering
        // epochs or restarting mid-run cannot shift the draws.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);

        let mut order: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Array3<f64>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let s = augment_sample(&train[i], &cfg.augment, &mut rng);
                    (s.image, s.label)
                })
                .collect();
            let (loss, grads) = model.batch_loss_and_grads(&batch, plan.gate, cfg.lambda)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss {loss} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut model.store, &trainable, &grads)?;
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_loss, val_accuracy) = evaluate_loss(model, val, cfg.lambda)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss {val_loss} at epoch {epoch}"
            )));
        }

        log::info!(
            "epoch {epoch}: gate={} frozen={} train_loss={train_loss:.6} val_loss={val_loss:.6} val_acc={val_accuracy:.4}",
            plan.gate,
            plan.ala_frozen
        );
        epochs.push(EpochRecord {
            epoch,
            gate: plan.gate.to_string(),
            ala_frozen: plan.ala_frozen,
            train_loss,
            val_loss,
            val_accuracy,
            params_checksum: model.checksum(),
            ala_checksum: model.store.checksum_prefix(&["ala."]),
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = Some(model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("stopping at epoch {epoch}: no improvement for {} epochs", cfg.patience);
                break;
            }
        }
    }

    model.store = best_params.expect("at least one epoch ran");
    Ok(TrainingReport {
        epochs,
        best_epoch,
        best_val_loss: best_val,
        stopping_epoch,
        final_checksum: model.checksum(),
    })
}
