//! Run reporting: the structured run-summary file written after
//! training + evaluation, and plain-text table renderers for explainer
//! and ablation comparisons.
//!
//! The summary deliberately contains no timestamps, durations, or
//! machine-specific fields: identical config and seed must produce a
//! byte-identical summary, which is what the determinism harness hashes.
//! Wall-clock timing belongs in the train log.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::train::TrainingReport;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub dataset: DatasetSummary,
    pub training: TrainingReport,
    pub checkpoint_sha256: String,
    /// Test-set evaluation, one report per explainer.
    pub eval: Vec<EvalReport>,
}

impl RunSummary {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self)
            .map_err(|e| Error::Internal(format!("cannot encode run summary: {e}")))?;
        fs::write(path, &json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<RunSummary> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("bad run summary {}: {e}", path.display())))
    }

    pub fn sha256(&self) -> Result<String> {
        let json = serde_json::to_vec(self)
            .map_err(|e| Error::Internal(format!("cannot encode run summary: {e}")))?;
        Ok(crate::params::hex(&Sha256::digest(&json)))
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    }
}

/// One row per explainer, metric columns as in the evaluation suite.
pub fn render_explainer_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>10} {:>15} {:>14} {:>14}\n",
        "explainer", "mIoU (↑)", "Insertion (↑)", "Deletion (↓)", "ID Score (↑)"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:>10} {:>15.3} {:>14.3} {:>14.3}\n",
            r.explainer,
            fmt_opt(r.mean_iou),
            r.insertion,
            r.deletion,
            r.id_score
        ));
    }
    out
}

/// One row per labeled configuration (ablation comparison); the report
/// is expected to be the model's own attention-map evaluation.
pub fn render_ablation_table(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>9} {:>10} {:>15} {:>14} {:>14}\n",
        "configuration", "accuracy", "mIoU (↑)", "Insertion (↑)", "Deletion (↓)", "ID Score (↑)"
    ));
    for (label, r) in rows {
        out.push_str(&format!(
            "{:<20} {:>9.3} {:>10} {:>15.3} {:>14.3} {:>14.3}\n",
            label,
            r.accuracy,
            fmt_opt(r.mean_iou),
            r.insertion,
            r.deletion,
            r.id_score
        ));
    }
    out
}
