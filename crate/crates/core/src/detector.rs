//! Nodule classification by nearest template under the sliding RMSE.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matcher::Matcher;
use crate::matrix::Matrix;
use crate::template::TemplateLibrary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Estimated nodule size in mm; 0 means no nodule.
    pub predicted_b: u8,
    pub scores: BTreeMap<u8, f64>,
    pub alignments: BTreeMap<u8, usize>,
    pub presence: bool,
    /// Gap between the best and second-best score. Diagnostic only.
    pub margin: f64,
}

/// Score `f` against every template; the smallest score wins, smaller size on ties.
pub fn classify(f: &Matrix, lib: &TemplateLibrary) -> Result<DetectionResult> {
    let matcher = Matcher::new(f);
    let mut scores = BTreeMap::new();
    let mut alignments = BTreeMap::new();
    for (&b, template) in &lib.templates {
        let r = matcher.align(template)?;
        scores.insert(b, r.rmse_min);
        alignments.insert(b, r.tau_star);
    }

    let mut best: Option<(u8, f64)> = None;
    for (&b, &s) in &scores {
        if best.is_none_or(|(_, bs)| s < bs) {
            best = Some((b, s));
        }
    }
    let (predicted_b, best_score) = best.expect("library has templates");
    let runner_up = scores
        .iter()
        .filter(|&(&b, _)| b != predicted_b)
        .map(|(_, &s)| s)
        .fold(f64::INFINITY, f64::min);

    Ok(DetectionResult {
        predicted_b,
        scores,
        alignments,
        presence: predicted_b >= 1,
        margin: if runner_up.is_finite() { runner_up - best_score } else { 0.0 },
    })
}

pub fn detect_presence(f: &Matrix, lib: &TemplateLibrary) -> Result<bool> {
    Ok(classify(f, lib)?.presence)
}
