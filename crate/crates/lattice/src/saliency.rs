//! Saliency explainers evaluated side by side: the model's own attention
//! map, two gradient-based baselines (Grad-CAM on the perception branch's
//! pre-pooling activation, Integrated Gradients on the input), and two
//! content-free controls (uniform and seeded random maps).
//!
//! Every explainer yields a pixel-resolution map in [0,1]; gradient-based
//! maps are max-normalized, the attention map is already bounded.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adapter::AttentionMap;
use crate::error::{Error, Result};
use crate::model::Model;

/// A classifier scored by its probability for one class. The full model
/// implements this; tests substitute analytic stubs.
pub trait ProbModel {
    fn class_prob(&self, image: &Array3<f64>, class: usize) -> Result<f64>;
}

impl ProbModel for Model {
    fn class_prob(&self, image: &Array3<f64>, class: usize) -> Result<f64> {
        if class >= self.cfg.num_classes {
            return Err(Error::Input(format!("class {class} out of range")));
        }
        Ok(self.predict(image)?.probs[class])
    }
}

/// A classifier that can also differentiate its class probability with
/// respect to the input image.
pub trait InputGradModel: ProbModel {
    fn class_prob_and_input_grad(
        &self,
        image: &Array3<f64>,
        class: usize,
    ) -> Result<(f64, Array3<f64>)>;
}

impl InputGradModel for Model {
    fn class_prob_and_input_grad(
        &self,
        image: &Array3<f64>,
        class: usize,
    ) -> Result<(f64, Array3<f64>)> {
        Model::class_prob_and_input_grad(self, image, class)
    }
}

/// Divide by the maximum when it is positive; a non-positive map becomes
/// all zeros.
pub fn max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let max = map.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        map.mapv(|v| (v / max).clamp(0.0, 1.0))
    } else {
        Array2::zeros(map.dim())
    }
}

/// Channel weights = spatial mean of the gradient; map = rectified
/// weighted sum of activation channels, max-normalized.
pub fn grad_cam_combine(activation: &Array3<f64>, gradient: &Array3<f64>) -> Result<Array2<f64>> {
    if activation.dim() != gradient.dim() {
        return Err(Error::Input(format!(
            "activation {:?} and gradient {:?} shapes differ",
            activation.dim(),
            gradient.dim()
        )));
    }
    let (c, h, w) = activation.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        let weight = gradient.index_axis(Axis(0), ch).mean().unwrap_or(0.0);
        map += &(&activation.index_axis(Axis(0), ch) * weight);
    }
    map.mapv_inplace(|v| v.max(0.0));
    Ok(max_normalize(&map))
}

/// Grad-CAM at the perception branch's pre-pooling activation, upsampled
/// to pixel resolution.
pub fn grad_cam(model: &Model, image: &Array3<f64>, class: usize) -> Result<AttentionMap> {
    let (activation, gradient) = model.pb_prepool_and_grad(image, class)?;
    let grid = grad_cam_combine(&activation, &gradient)?;
    let (_, h, w) = image.dim();
    Ok(AttentionMap::from_grid(grid, (h, w)))
}

/// Riemann-sum path integral from the zero baseline:
/// attribution = x ⊙ mean over k=1..steps of ∇f(k/steps · x).
/// The pixel map sums |attribution| over channels, max-normalized.
pub fn integrated_gradients<M: InputGradModel>(
    model: &M,
    image: &Array3<f64>,
    class: usize,
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Input("integrated gradients needs at least 1 step".into()));
    }
    let mut grad_sum = Array3::<f64>::zeros(image.dim());
    for k in 1..=steps {
        let scaled = image * (k as f64 / steps as f64);
        let (_, grad) = model.class_prob_and_input_grad(&scaled, class)?;
        grad_sum += &grad;
    }
    let attribution = image * &grad_sum / steps as f64;
    let (c, h, w) = attribution.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    for ch in 0..c {
        map += &attribution.index_axis(Axis(0), ch).mapv(f64::abs);
    }
    Ok(max_normalize(&map))
}

/// Constant map: every pixel 0.5. The content-free control for the
/// insertion/deletion comparison (reveal order degenerates to row-major).
pub fn uniform_map(size: (usize, usize)) -> Array2<f64> {
    Array2::from_elem(size, 0.5)
}

/// Per-pixel uniform noise, seeded per sample so evaluation order cannot
/// change the maps. The content-free control for mean IoU.
pub fn random_map(size: (usize, usize), seed: u64, sample_id: &str) -> Array2<f64> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let digest = h.finalize();
    let per_sample = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(per_sample);
    Array2::from_shape_fn(size, |_| rng.random_range(0.0..1.0))
}

/// The explainers the evaluation harness can compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Explainer {
    /// The model's own attention map.
    Ala,
    /// Grad-CAM on the perception branch.
    GradCam,
    /// Integrated gradients with this many Riemann steps.
    IntegratedGradients { steps: usize },
    /// Constant control map.
    Uniform,
    /// Seeded per-pixel noise control.
    Random { seed: u64 },
}

impl Explainer {
    pub fn name(&self) -> &'static str {
        match self {
            Explainer::Ala => "ala",
            Explainer::GradCam => "gradcam",
            Explainer::IntegratedGradients { .. } => "ig",
            Explainer::Uniform => "uniform",
            Explainer::Random { .. } => "random",
        }
    }

    /// Parse a CLI name; `ig` takes its step count from `ig_steps`,
    /// `random` its seed from `seed`.
    pub fn parse(name: &str, ig_steps: usize, seed: u64) -> Result<Explainer> {
        match name {
            "ala" => Ok(Explainer::Ala),
            "gradcam" => Ok(Explainer::GradCam),
            "ig" => Ok(Explainer::IntegratedGradients { steps: ig_steps }),
            "uniform" => Ok(Explainer::Uniform),
            "random" => Ok(Explainer::Random { seed }),
            other => Err(Error::Input(format!(
                "unknown explainer '{other}' (expected ala, gradcam, ig, uniform, or random)"
            ))),
        }
    }

    /// Pixel-resolution saliency map in [0,1] for one image and class.
    pub fn map(
        &self,
        model: &Model,
        image: &Array3<f64>,
        class: usize,
        sample_id: &str,
    ) -> Result<Array2<f64>> {
        let (_, h, w) = image.dim();
        match self {
            Explainer::Ala => Ok(model.attention(image)?.pixel_map),
            Explainer::GradCam => Ok(grad_cam(model, image, class)?.pixel_map),
            Explainer::IntegratedGradients { steps } => {
                integrated_gradients(model, image, class, *steps)
            }
            Explainer::Uniform => Ok(uniform_map((h, w))),
            Explainer::Random { seed } => Ok(random_map((h, w), *seed, sample_id)),
        }
    }
}
