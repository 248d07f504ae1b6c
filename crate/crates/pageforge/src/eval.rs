//! Page-parallel evaluation and its JSON report.

use pageforge_core::pipeline::{summarize, EvalSummary, Model, PageEval};
use pageforge_core::synth::PageSample;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::par_map;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setup: String,
    pub split: String,
    #[serde(flatten)]
    pub summary: EvalSummary,
    pub config_hash: String,
}

/// Scores every page on up to [`crate::threads`] workers and merges the
/// counts in page order.
pub fn evaluate(model: &Model<f32>, pages: &[PageSample]) -> Result<EvalSummary> {
    let per_page = par_map(pages, |p| model.evaluate_page(p));
    let mut total = PageEval::default();
    for r in per_page {
        total.merge(&r?);
    }
    Ok(summarize(&total, model.setup, pages.len())?)
}

pub fn report(model: &Model<f32>, split: &str, pages: &[PageSample]) -> Result<EvalReport> {
    Ok(EvalReport {
        setup: model.setup.name().to_string(),
        split: split.to_string(),
        summary: evaluate(model, pages)?,
        config_hash: crate::config::hash(&model.config),
    })
}
