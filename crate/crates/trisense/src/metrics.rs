//! Detection and localization metrics: AUROC (Mann–Whitney with half tie
//! credit), threshold-swept F1-max, step-wise AUPR, and the category report
//! assembling them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::ModalityId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    Parameter(String),
    #[error("only one class present: {0}")]
    SingleClass(String),
    #[error("no positive labels: {0}")]
    NoPositives(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
}

/// Parallel scores and binary labels (`true` = anomalous).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, MetricsError> {
        if scores.len() != labels.len() {
            return Err(MetricsError::Mismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.len() < 2 {
            return Err(MetricsError::Parameter(format!(
                "need at least 2 labeled scores, got {}",
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricsError::Parameter("non-finite score".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Indices sorted by descending score; equal scores form one group.
    fn descending_groups(&self) -> Vec<(f64, usize, usize)> {
        // (score, positives in group, negatives in group)
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap());
        let mut groups = Vec::new();
        let mut i = 0;
        while i < idx.len() {
            let s = self.scores[idx[i]];
            let mut pos = 0usize;
            let mut neg = 0usize;
            while i < idx.len() && self.scores[idx[i]] == s {
                if self.labels[idx[i]] {
                    pos += 1;
                } else {
                    neg += 1;
                }
                i += 1;
            }
            groups.push((s, pos, neg));
        }
        groups
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic:
/// `(concordant + ½·tied) / (n₊·n₋)`, computed from integer pair counts so
/// that `auroc(labels) + auroc(flipped labels) == 1` holds exactly.
pub fn auroc(data: &LabeledScores) -> Result<f64, MetricsError> {
    let n_pos = data.positives();
    let n_neg = data.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass(format!(
            "{n_pos} positives, {n_neg} negatives"
        )));
    }
    let mut concordant: u128 = 0; // anomalous scored strictly above normal
    let mut tied: u128 = 0;
    let mut neg_below: u128 = 0; // negatives with strictly smaller score
    for &(_, pos, neg) in data.descending_groups().iter().rev() {
        concordant += pos as u128 * neg_below;
        tied += pos as u128 * neg as u128;
        neg_below += neg as u128;
    }
    let numerator = 2 * concordant + tied;
    let denominator = 2 * n_pos as u128 * n_neg as u128;
    // Evaluate the smaller of the two complementary ratios directly and the
    // larger as its exact complement, so flipping labels flips the value
    // around one half without double rounding.
    Ok(if 2 * numerator <= denominator {
        numerator as f64 / denominator as f64
    } else {
        1.0 - (denominator - numerator) as f64 / denominator as f64
    })
}

/// Maximum F1 over thresholds `τ` drawn from the unique scores, with
/// prediction `score ≥ τ`.
pub fn f1_max(data: &LabeledScores) -> Result<f64, MetricsError> {
    let total_pos = data.positives();
    if total_pos == 0 {
        return Err(MetricsError::NoPositives(format!("{} samples, all normal", data.len())));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best = 0.0f64;
    for (_, pos, neg) in data.descending_groups() {
        tp += pos;
        fp += neg;
        let fneg = total_pos - tp;
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        best = best.max(f1);
    }
    Ok(best)
}

/// Area under the precision–recall curve by the step-wise rule
/// `Σ (R_k − R_{k-1}) · P_k` over a descending-score sweep with tied scores
/// grouped.
pub fn aupr(data: &LabeledScores) -> Result<f64, MetricsError> {
    let total_pos = data.positives();
    if total_pos == 0 {
        return Err(MetricsError::NoPositives(format!("{} samples, all normal", data.len())));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut area = 0.0f64;
    for (_, pos, neg) in data.descending_groups() {
        tp += pos;
        fp += neg;
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Localization quality of one modality within one category.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    pub auroc: f64,
    pub f1_max: f64,
    pub aupr: f64,
}

/// Everything needed to evaluate one category.
#[derive(Debug, Clone)]
pub struct CategoryScores {
    pub category: String,
    /// Fusion-configuration name → per-sample (score, anomalous) pairs.
    pub object: BTreeMap<String, Vec<(f64, bool)>>,
    /// Modality → pooled per-pixel / per-point scores and labels.
    pub localization: BTreeMap<ModalityId, LabeledScores>,
}

/// One row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    /// Fusion-configuration name → object-level AUROC.
    pub object_auroc: BTreeMap<String, f64>,
    pub localization: BTreeMap<ModalityId, LocalizationMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    /// Arithmetic mean of the category rows.
    pub mean: CategoryReport,
}

/// Computes per-category object AUROC for every fusion configuration plus
/// pooled localization metrics per modality, and appends the mean row. All
/// categories must report the same configuration names and modalities.
pub fn evaluate(inputs: &[CategoryScores]) -> Result<EvalReport, MetricsError> {
    if inputs.is_empty() {
        return Err(MetricsError::Parameter("no categories to evaluate".into()));
    }
    let mut categories = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut object_auroc = BTreeMap::new();
        for (config, pairs) in &input.object {
            let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.iter().copied().unzip();
            let data = LabeledScores::new(scores, labels).map_err(|e| {
                MetricsError::Parameter(format!(
                    "category {}, configuration {config}: {e}",
                    input.category
                ))
            })?;
            let value = auroc(&data).map_err(|e| {
                MetricsError::SingleClass(format!(
                    "category {}, configuration {config}: {e}",
                    input.category
                ))
            })?;
            object_auroc.insert(config.clone(), value);
        }
        let mut localization = BTreeMap::new();
        for (&modality, data) in &input.localization {
            let context = |e: MetricsError| {
                MetricsError::Parameter(format!("category {}, {modality}: {e}", input.category))
            };
            localization.insert(
                modality,
                LocalizationMetrics {
                    auroc: auroc(data).map_err(context)?,
                    f1_max: f1_max(data).map_err(context)?,
                    aupr: aupr(data).map_err(context)?,
                },
            );
        }
        categories.push(CategoryReport {
            category: input.category.clone(),
            object_auroc,
            localization,
        });
    }

    let first = &categories[0];
    for row in &categories[1..] {
        if row.object_auroc.keys().ne(first.object_auroc.keys()) {
            return Err(MetricsError::Mismatch(format!(
                "category {} reports different fusion configurations than {}",
                row.category, first.category
            )));
        }
        if row.localization.keys().ne(first.localization.keys()) {
            return Err(MetricsError::Mismatch(format!(
                "category {} reports different modalities than {}",
                row.category, first.category
            )));
        }
    }

    let k = categories.len() as f64;
    let mut mean_object = BTreeMap::new();
    for config in first.object_auroc.keys() {
        let sum: f64 = categories.iter().map(|c| c.object_auroc[config]).sum();
        mean_object.insert(config.clone(), sum / k);
    }
    let mut mean_localization = BTreeMap::new();
    for &modality in first.localization.keys() {
        let sum = |f: fn(&LocalizationMetrics) -> f64| {
            categories.iter().map(|c| f(&c.localization[&modality])).sum::<f64>() / k
        };
        mean_localization.insert(
            modality,
            LocalizationMetrics {
                auroc: sum(|m| m.auroc),
                f1_max: sum(|m| m.f1_max),
                aupr: sum(|m| m.aupr),
            },
        );
    }

    Ok(EvalReport {
        categories,
        mean: CategoryReport {
            category: "mean".to_string(),
            object_auroc: mean_object,
            localization: mean_localization,
        },
    })
}

impl EvalReport {
    fn rows(&self) -> impl Iterator<Item = &CategoryReport> {
        self.categories.iter().chain(std::iter::once(&self.mean))
    }

    /// Aligned text table: one block for object-level AUROC per fusion
    /// configuration, one for per-modality localization.
    pub fn to_text(&self) -> String {
        let configs: Vec<&String> = self.mean.object_auroc.keys().collect();
        let modalities: Vec<ModalityId> = self.mean.localization.keys().copied().collect();
        let name_width = self
            .rows()
            .map(|r| r.category.len())
            .max()
            .unwrap_or(8)
            .max("category".len());

        let mut out = String::new();
        out.push_str("Object-level AUROC\n");
        out.push_str(&format!("{:name_width$}", "category"));
        for c in &configs {
            out.push_str(&format!("  {c:>12}"));
        }
        out.push('\n');
        for row in self.rows() {
            out.push_str(&format!("{:name_width$}", row.category));
            for c in &configs {
                out.push_str(&format!("  {:>12.4}", row.object_auroc[*c]));
            }
            out.push('\n');
        }

        if !modalities.is_empty() {
            out.push_str("\nLocalization (AUROC / F1-max / AUPR)\n");
            out.push_str(&format!("{:name_width$}", "category"));
            for m in &modalities {
                out.push_str(&format!("  {:>24}", m.to_string()));
            }
            out.push('\n');
            for row in self.rows() {
                out.push_str(&format!("{:name_width$}", row.category));
                for m in &modalities {
                    let l = &row.localization[m];
                    out.push_str(&format!(
                        "  {:>24}",
                        format!("{:.4} / {:.4} / {:.4}", l.auroc, l.f1_max, l.aupr)
                    ));
                }
                out.push('\n');
            }
        }
        out
    }

    /// CSV with one row per (category, metric block) cell, for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("category,kind,name,metric,value\n");
        for row in self.rows() {
            for (config, v) in &row.object_auroc {
                out.push_str(&format!("{},object,{config},auroc,{v}\n", row.category));
            }
            for (m, l) in &row.localization {
                let tag = m.tag();
                out.push_str(&format!("{},localization,{tag},auroc,{}\n", row.category, l.auroc));
                out.push_str(&format!("{},localization,{tag},f1_max,{}\n", row.category, l.f1_max));
                out.push_str(&format!("{},localization,{tag},aupr,{}\n", row.category, l.aupr));
            }
        }
        out
    }
}
