//! Detection metrics: presence precision/recall per size, size-estimation
//! accuracy, distribution of negatives, and the confusion matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::DetectionResult;
use crate::error::{Error, Result};
use crate::template::MAX_SIZE;

const CLASSES: usize = MAX_SIZE as usize + 1;

pub fn precision(tp: u32, fp: u32) -> Result<f64> {
    if tp + fp == 0 {
        return Err(Error::UndefinedMetric("precision"));
    }
    Ok(f64::from(tp) / f64::from(tp + fp))
}

pub fn recall(tp: u32, fn_: u32) -> Result<f64> {
    if tp + fn_ == 0 {
        return Err(Error::UndefinedMetric("recall"));
    }
    Ok(f64::from(tp) / f64::from(tp + fn_))
}

/// Precision and recall; a metric with a zero denominator is `None`.
pub fn precision_recall(tp: u32, fp: u32, fn_: u32) -> (Option<f64>, Option<f64>) {
    (precision(tp, fp).ok(), recall(tp, fn_).ok())
}

/// Counts indexed `[true size][predicted size]`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u32; CLASSES]; CLASSES]);

impl ConfusionMatrix {
    pub fn add(&mut self, truth: u8, predicted: u8) {
        self.0[usize::from(truth)][usize::from(predicted)] += 1;
    }

    pub fn row_total(&self, truth: usize) -> u32 {
        self.0[truth].iter().sum()
    }

    pub fn col_total(&self, predicted: usize) -> u32 {
        self.0.iter().map(|r| r[predicted]).sum()
    }

    pub fn total(&self) -> u32 {
        self.0.iter().flatten().sum()
    }

    /// Share of traces predicted as size `b` that really contain a nodule.
    pub fn presence_precision(&self, b: usize) -> Result<f64> {
        let with = (1..CLASSES).map(|t| self.0[t][b]).sum::<u32>();
        precision(with, self.0[0][b])
    }

    /// Share of traces of true size `b` reported as containing a nodule.
    pub fn presence_recall(&self, b: usize) -> Result<f64> {
        let detected = self.0[b][1..].iter().sum::<u32>();
        recall(detected, self.0[b][0])
    }
}

/// Fraction of traces of each true size `b >= 2` whose estimate is within
/// `tolerance_mm`. Sizes without traces are omitted.
pub fn size_accuracy(confusion: &ConfusionMatrix, tolerance_mm: u8) -> BTreeMap<u8, f64> {
    let tol = usize::from(tolerance_mm);
    let mut out = BTreeMap::new();
    for b in 2..CLASSES {
        let total = confusion.row_total(b);
        if total == 0 {
            continue;
        }
        // admissible estimates are clipped to existing classes
        let lo = b.saturating_sub(tol);
        let hi = (b + tol).min(CLASSES - 1);
        let hits: u32 = confusion.0[b][lo..=hi].iter().sum();
        out.insert(b as u8, f64::from(hits) / f64::from(total));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class_counts: BTreeMap<u8, u32>,
    pub per_size_precision: BTreeMap<u8, f64>,
    pub per_size_recall: BTreeMap<u8, f64>,
    pub exact_acc: BTreeMap<u8, f64>,
    pub tol1_acc: BTreeMap<u8, f64>,
    /// True size of every missed nodule (prediction 0, truth >= 1).
    pub negatives_breakdown: BTreeMap<u8, u32>,
    /// Fraction of nodule-free traces classified as nodule-free.
    pub no_nodule_specificity: Option<f64>,
}

pub fn build_report(results: &[(u8, DetectionResult)]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    let mut confusion = ConfusionMatrix::default();
    for (truth, r) in results {
        if usize::from(*truth) >= CLASSES || usize::from(r.predicted_b) >= CLASSES {
            return Err(Error::InvalidTrace(format!(
                "size out of range: truth {truth}, predicted {}",
                r.predicted_b
            )));
        }
        confusion.add(*truth, r.predicted_b);
    }
    Ok(report_from_confusion(confusion))
}

pub fn report_from_confusion(confusion: ConfusionMatrix) -> EvalReport {
    let mut per_class_counts = BTreeMap::new();
    let mut per_size_precision = BTreeMap::new();
    let mut per_size_recall = BTreeMap::new();
    let mut negatives_breakdown = BTreeMap::new();
    for b in 0..CLASSES {
        let n = confusion.row_total(b);
        if n > 0 {
            per_class_counts.insert(b as u8, n);
        }
        if b == 0 {
            continue;
        }
        if let Ok(p) = confusion.presence_precision(b) {
            per_size_precision.insert(b as u8, p);
        }
        if let Ok(r) = confusion.presence_recall(b) {
            per_size_recall.insert(b as u8, r);
        }
        if confusion.0[b][0] > 0 {
            negatives_breakdown.insert(b as u8, confusion.0[b][0]);
        }
    }
    let no_nodule_specificity = {
        let n = confusion.row_total(0);
        (n > 0).then(|| f64::from(confusion.0[0][0]) / f64::from(n))
    };
    EvalReport {
        exact_acc: size_accuracy(&confusion, 0),
        tol1_acc: size_accuracy(&confusion, 1),
        confusion,
        per_class_counts,
        per_size_precision,
        per_size_recall,
        negatives_breakdown,
        no_nodule_specificity,
    }
}

fn fmt_rate(v: Option<&f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.3}"))
}

/// Per-size metrics as CSV:
/// `b,count,precision,recall,exact_acc,tol1_acc,missed`.
/// Undefined rates are left empty.
pub fn report_csv(r: &EvalReport) -> String {
    let mut out = String::from("b,count,precision,recall,exact_acc,tol1_acc,missed\n");
    for b in 0..CLASSES as u8 {
        let _ = writeln!(
            out,
            "{b},{},{},{},{},{},{}",
            r.per_class_counts.get(&b).copied().unwrap_or(0),
            fmt_rate(r.per_size_precision.get(&b)),
            fmt_rate(r.per_size_recall.get(&b)),
            fmt_rate(r.exact_acc.get(&b)),
            fmt_rate(r.tol1_acc.get(&b)),
            r.confusion.0[usize::from(b)][0],
        );
    }
    out
}

/// Confusion matrix as CSV, one row per true size.
pub fn confusion_csv(c: &ConfusionMatrix) -> String {
    let mut out = String::from("true_b,pred_0,pred_1,pred_2,pred_3,pred_4,pred_5\n");
    for (b, row) in c.0.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "{b},{}", cells.join(","));
    }
    out
}

/// Grouped vertical bar chart. `series` holds `(name, colour, values)` with
/// one value per category; values are fractions in `[0, 1]` unless `y_max`
/// says otherwise.
pub fn bar_chart_svg(
    title: &str,
    categories: &[String],
    series: &[(&str, &str, Vec<Option<f64>>)],
    y_max: f64,
) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (50.0, 20.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, xml_escape(title));
    for k in 0..=4 {
        let v = y_max * f64::from(k) / 4.0;
        let y = top + plot_h * (1.0 - f64::from(k) / 4.0);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - right);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y + 4.0);
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + group_w * ci as f64 + group_w * 0.1;
        for (si, (_, colour, values)) in series.iter().enumerate() {
            if let Some(Some(v)) = values.get(ci) {
                let bh = plot_h * (v / y_max).clamp(0.0, 1.0);
                let x = gx + bar_w * si as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{bh:.1}" fill="{colour}"/>"#,
                    top + plot_h - bh,
                    bar_w * 0.95
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            left + group_w * (ci as f64 + 0.5),
            h - bottom + 18.0,
            xml_escape(cat)
        );
    }
    for (si, (name, colour, _)) in series.iter().enumerate() {
        let x = left + 10.0 + 130.0 * si as f64;
        let y = h - 14.0;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{colour}"/>"#, y - 9.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 14.0, xml_escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Charts for a report: `(file name, svg)`.
pub fn report_plots(r: &EvalReport) -> Vec<(&'static str, String)> {
    let sizes: Vec<u8> = (1..CLASSES as u8).collect();
    let cats: Vec<String> = sizes.iter().map(|b| format!("{b} mm")).collect();
    let pick = |m: &BTreeMap<u8, f64>| sizes.iter().map(|b| m.get(b).copied()).collect::<Vec<_>>();
    let presence = bar_chart_svg(
        "Presence precision and recall",
        &cats,
        &[
            ("precision", "#4878d0", pick(&r.per_size_precision)),
            ("recall", "#ee854a", pick(&r.per_size_recall)),
        ],
        1.0,
    );

    let acc_sizes: Vec<u8> = (2..CLASSES as u8).collect();
    let acc_cats: Vec<String> = acc_sizes.iter().map(|b| format!("{b} mm")).collect();
    let pick_acc = |m: &BTreeMap<u8, f64>| acc_sizes.iter().map(|b| m.get(b).copied()).collect::<Vec<_>>();
    let accuracy = bar_chart_svg(
        "Size estimation accuracy",
        &acc_cats,
        &[
            ("exact", "#6acc64", pick_acc(&r.exact_acc)),
            ("within 1 mm", "#d65f5f", pick_acc(&r.tol1_acc)),
        ],
        1.0,
    );

    let missed_total: u32 = r.negatives_breakdown.values().sum();
    let shares: Vec<Option<f64>> = sizes
        .iter()
        .map(|b| {
            (missed_total > 0).then(|| {
                f64::from(r.negatives_breakdown.get(b).copied().unwrap_or(0)) / f64::from(missed_total)
            })
        })
        .collect();
    let negatives = bar_chart_svg(
        "Share of missed nodules by true size",
        &cats,
        &[("share", "#956cb4", shares)],
        1.0,
    );

    vec![
        ("presence.svg", presence),
        ("size_accuracy.svg", accuracy),
        ("negatives.svg", negatives),
    ]
}
