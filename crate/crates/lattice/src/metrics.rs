//! Saliency evaluation: IoU of binarized maps against reference masks,
//! insertion/deletion curves with trapezoidal AUC, the ID score
//! (insertion AUC − deletion AUC), and per-dataset aggregation.
//!
//! Insertion reveals pixels of the image in decreasing saliency order on
//! a black canvas; deletion blacks them out of the intact image in the
//! same order. Removed or not-yet-inserted pixels are exactly zero in all
//! channels — no blur baselines — so `i_n + d_n = x` at every step.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::saliency::{Explainer, ProbModel};

pub type BinaryMask = Array2<bool>;

/// Default binarization threshold for mean IoU.
pub const DEFAULT_THETA: f64 = 0.5;
/// Default number of insertion/deletion curve segments.
pub const DEFAULT_CURVE_STEPS: usize = 100;

/// |a∩b| / |a∪b|, with two empty masks scoring 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Input(format!(
            "mask shapes {:?} and {:?} differ",
            a.dim(),
            b.dim()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Threshold a map at θ, with values equal to θ included.
pub fn binarize(map: &Array2<f64>, theta: f64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&theta) || theta <= 0.0 {
        return Err(Error::Config(format!("theta must be in (0,1), got {theta}")));
    }
    Ok(map.mapv(|v| v >= theta))
}

/// Pixel coordinates by descending saliency; ties keep row-major order.
pub fn pixel_order(map: &Array2<f64>) -> Vec<(usize, usize)> {
    let mut entries: Vec<((usize, usize), f64)> =
        map.indexed_iter().map(|(idx, &v)| (idx, v)).collect();
    // indexed_iter walks row-major; a stable sort preserves that for ties.
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("saliency values are ordered"));
    entries.into_iter().map(|(idx, _)| idx).collect()
}

/// Insertion input (top-n pixels of x on a black canvas) and deletion
/// input (x with the top-n pixels blacked out). All channels of a pixel
/// move together.
pub fn masked_inputs(
    image: &Array3<f64>,
    order: &[(usize, usize)],
    n: usize,
) -> (Array3<f64>, Array3<f64>) {
    let (c, _, _) = image.dim();
    let mut inserted = Array3::<f64>::zeros(image.dim());
    let mut deleted = image.clone();
    for &(y, x) in &order[..n] {
        for ch in 0..c {
            inserted[[ch, y, x]] = image[[ch, y, x]];
            deleted[[ch, y, x]] = 0.0;
        }
    }
    (inserted, deleted)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveResult {
    /// Pixel counts, from 0 to h·w inclusive.
    pub steps: Vec<usize>,
    pub insertion_values: Vec<f64>,
    pub deletion_values: Vec<f64>,
    pub insertion_auc: f64,
    pub deletion_auc: f64,
    pub id_score: f64,
}

/// Trapezoidal rule over pixel counts normalized to [0,1].
fn trapezoid_auc(steps: &[usize], values: &[f64], total: usize) -> f64 {
    let mut auc = 0.0;
    for i in 1..steps.len() {
        let dx = (steps[i] - steps[i - 1]) as f64 / total as f64;
        auc += dx * (values[i] + values[i - 1]) / 2.0;
    }
    auc
}

/// Evaluate the class probability along both masking curves at
/// `num_steps`+1 evenly spaced pixel counts (0 and h·w always included;
/// `num_steps = h·w` walks every pixel).
pub fn insertion_deletion<M: ProbModel>(
    model: &M,
    image: &Array3<f64>,
    saliency: &Array2<f64>,
    class: usize,
    num_steps: usize,
) -> Result<CurveResult> {
    let (_, h, w) = image.dim();
    if saliency.dim() != (h, w) {
        return Err(Error::Input(format!(
            "saliency shape {:?} does not match image ({h}, {w})",
            saliency.dim()
        )));
    }
    if num_steps < 2 {
        return Err(Error::Config("num_steps must be at least 2".into()));
    }
    let total = h * w;
    let num_steps = num_steps.min(total);
    let order = pixel_order(saliency);

    let mut steps = Vec::with_capacity(num_steps + 1);
    for k in 0..=num_steps {
        let n = ((k as f64 / num_steps as f64) * total as f64).round() as usize;
        if steps.last() != Some(&n) {
            steps.push(n);
        }
    }

    let mut insertion_values = Vec::with_capacity(steps.len());
    let mut deletion_values = Vec::with_capacity(steps.len());
    for &n in &steps {
        let (ins, del) = masked_inputs(image, &order, n);
        insertion_values.push(model.class_prob(&ins, class)?);
        deletion_values.push(model.class_prob(&del, class)?);
    }
    let insertion_auc = trapezoid_auc(&steps, &insertion_values, total);
    let deletion_auc = trapezoid_auc(&steps, &deletion_values, total);
    Ok(CurveResult {
        steps,
        insertion_values,
        deletion_values,
        insertion_auc,
        deletion_auc,
        id_score: insertion_auc - deletion_auc,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    pub label: usize,
    pub predicted: usize,
    /// Absent when the sample carries no reference mask.
    pub iou: Option<f64>,
    pub insertion_auc: f64,
    pub deletion_auc: f64,
    pub id_score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub explainer: String,
    /// Mean over samples that carry masks; absent when none do.
    pub mean_iou: Option<f64>,
    pub insertion: f64,
    pub deletion: f64,
    pub id_score: f64,
    pub accuracy: f64,
    pub per_sample: Vec<SampleEval>,
}

/// Score one explainer over a dataset: IoU against reference masks where
/// present, insertion/deletion AUC for the ground-truth class everywhere.
pub fn evaluate(
    model: &Model,
    samples: &[ImageSample],
    explainer: Explainer,
    theta: f64,
    num_steps: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut correct = 0usize;
    for s in samples {
        let map = explainer.map(model, &s.image, s.label, &s.sample_id)?;
        let iou_value = match &s.mask {
            Some(mask) => Some(iou(&binarize(&map, theta)?, mask)?),
            None => None,
        };
        let curve = insertion_deletion(model, &s.image, &map, s.label, num_steps)?;
        let predicted = model.predict(&s.image)?.argmax();
        correct += (predicted == s.label) as usize;
        per_sample.push(SampleEval {
            sample_id: s.sample_id.clone(),
            label: s.label,
            predicted,
            iou: iou_value,
            insertion_auc: curve.insertion_auc,
            deletion_auc: curve.deletion_auc,
            id_score: curve.id_score,
        });
    }
    let with_mask: Vec<f64> = per_sample.iter().filter_map(|p| p.iou).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let ins: Vec<f64> = per_sample.iter().map(|p| p.insertion_auc).collect();
    let del: Vec<f64> = per_sample.iter().map(|p| p.deletion_auc).collect();
    let id: Vec<f64> = per_sample.iter().map(|p| p.id_score).collect();
    Ok(EvalReport {
        explainer: explainer.name().to_string(),
        mean_iou: if with_mask.is_empty() { None } else { Some(mean(&with_mask)) },
        insertion: mean(&ins),
        deletion: mean(&del),
        id_score: mean(&id),
        accuracy: correct as f64 / samples.len() as f64,
        per_sample,
    })
}
