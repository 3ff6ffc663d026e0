//! Ranking metrics and experiment reports: AUC, PV-bucketed AUC, codebook
//! layer importance and ablation comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{l2_norm, Tensor};
use crate::synthgen::PvBucketing;

/// Rank-based ROC AUC. Tied scores share their average rank, so each tied
/// positive/negative pair contributes one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auc",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("auc received a NaN score"));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes (got {pos} positives, {neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += avg * tied_pos as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAuc {
    pub bucket: String,
    /// `None` when the bucket lacks one of the two classes.
    pub auc: Option<f64>,
    pub samples: usize,
    pub clicks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub ablation: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub total_auc: f64,
    pub samples: usize,
    pub buckets: Vec<BucketAuc>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn bucket(&self, label: &str) -> Option<&BucketAuc> {
        self.buckets.iter().find(|b| b.bucket == label)
    }
}

/// AUC overall and within each PV bucket of the candidate item.
pub fn grouped_auc(
    scores: &[f64],
    labels: &[bool],
    item_pv: &[u64],
    bucketing: &PvBucketing,
    meta: ReportMeta,
) -> Result<EvalReport> {
    if item_pv.len() != scores.len() {
        return Err(Error::Dimension {
            op: "grouped_auc",
            lhs: vec![scores.len()],
            rhs: vec![item_pv.len()],
        });
    }
    let total_auc = auc(scores, labels)?;
    let mut per: Vec<(Vec<f64>, Vec<bool>)> = vec![(Vec::new(), Vec::new()); bucketing.len()];
    for ((&s, &y), &pv) in scores.iter().zip(labels).zip(item_pv) {
        let b = bucketing.bucket_of(pv);
        per[b].0.push(s);
        per[b].1.push(y);
    }
    let buckets = per
        .into_iter()
        .enumerate()
        .map(|(b, (s, y))| BucketAuc {
            bucket: bucketing.label(b),
            auc: auc(&s, &y).ok(),
            samples: s.len(),
            clicks: y.iter().filter(|&&c| c).count(),
        })
        .collect();
    Ok(EvalReport {
        total_auc,
        samples: scores.len(),
        buckets,
        meta,
    })
}

/// Aligned plain-text table: one row per report, total AUC then each bucket.
pub fn format_auc_table(rows: &[(&str, &EvalReport)]) -> String {
    let mut out = String::new();
    let Some((_, first)) = rows.first() else {
        return out;
    };
    let _ = write!(out, "{:<12} {:>10}", "model", "total");
    for b in &first.buckets {
        let _ = write!(out, " {:>14}", b.bucket);
    }
    out.push('\n');
    for (name, r) in rows {
        let _ = write!(out, "{:<12} {:>10.4}", name, r.total_auc);
        for b in &r.buckets {
            match b.auc {
                Some(a) => {
                    let _ = write!(out, " {:>14.4}", a);
                }
                None => {
                    let _ = write!(out, " {:>14}", "undefined");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<12} {:>10}", "samples", first.samples);
    for b in &first.buckets {
        let _ = write!(out, " {:>14}", b.samples);
    }
    out.push('\n');
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    /// Mean codeword L2 norm per layer, normalized to sum 1.
    pub codebook: Vec<f64>,
    /// Mean L2 norm of the first fusion layer's weight rows fed by each
    /// layer's slice of the concatenated input, normalized to sum 1.
    pub fusion: Vec<f64>,
    pub warning: Option<String>,
}

fn normalize_sum(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.into_iter().map(|x| x / s).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Relative importance of residual layers from an alignment codebook stack
/// (`layers` tensors of `K×d`) and the first fusion weight matrix
/// (`(L·d)×hidden`, input-major).
pub fn layer_importance(codebooks: &[Tensor], fusion_first_w: &Tensor) -> Result<LayerImportance> {
    let layers = codebooks.len();
    if layers == 0 {
        return Err(Error::contract("layer importance over zero layers"));
    }
    let d = codebooks[0].cols();
    if fusion_first_w.rows() != layers * d {
        return Err(Error::Dimension {
            op: "layer_importance",
            lhs: vec![layers, d],
            rhs: fusion_first_w.shape().to_vec(),
        });
    }
    let code_norms: Vec<f64> = codebooks
        .iter()
        .map(|c| (0..c.rows()).map(|k| l2_norm(c.row(k))).sum::<f64>() / c.rows() as f64)
        .collect();
    let fusion_norms: Vec<f64> = (0..layers)
        .map(|l| {
            (l * d..(l + 1) * d)
                .map(|r| l2_norm(fusion_first_w.row(r)))
                .sum::<f64>()
                / d as f64
        })
        .collect();
    let warning = code_norms
        .iter()
        .all(|&x| x == 0.0)
        .then(|| "codebook is all zero (untrained); importance is undefined".to_string());
    Ok(LayerImportance {
        codebook: normalize_sum(code_norms),
        fusion: normalize_sum(fusion_norms),
        warning,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tag: String,
    pub report: Option<EvalReport>,
    pub stream_hash: Option<String>,
    /// Total AUC minus the `full` row's total AUC.
    pub delta: Option<f64>,
    /// Per-bucket AUC minus `full`'s, where both are defined.
    pub bucket_deltas: Vec<Option<f64>>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub struct AblationRun {
    pub report: EvalReport,
    pub stream_hash: String,
}

/// Runs every tag through `run` and tabulates deltas against `full`.
/// Failing members are recorded with their error and the suite continues.
pub fn ablation_suite<F>(tags: &[String], mut run: F) -> AblationTable
where
    F: FnMut(&str) -> Result<AblationRun>,
{
    let mut rows: Vec<AblationRow> = tags
        .iter()
        .map(|tag| match run(tag) {
            Ok(r) => AblationRow {
                tag: tag.clone(),
                report: Some(r.report),
                stream_hash: Some(r.stream_hash),
                delta: None,
                bucket_deltas: Vec::new(),
                failure: None,
            },
            Err(e) => AblationRow {
                tag: tag.clone(),
                report: None,
                stream_hash: None,
                delta: None,
                bucket_deltas: Vec::new(),
                failure: Some(e.to_string()),
            },
        })
        .collect();
    let full = rows.iter().find(|r| r.tag == "full").and_then(|r| r.report.clone());
    if let Some(full) = full {
        for row in rows.iter_mut() {
            if let Some(rep) = &row.report {
                row.delta = Some(rep.total_auc - full.total_auc);
                row.bucket_deltas = rep
                    .buckets
                    .iter()
                    .zip(&full.buckets)
                    .map(|(b, f)| match (b.auc, f.auc) {
                        (Some(x), Some(y)) => Some(x - y),
                        _ => None,
                    })
                    .collect();
            }
        }
    }
    AblationTable { rows }
}

impl AblationTable {
    pub fn row(&self, tag: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.tag == tag)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>10} {:>10}", "model", "total", "delta");
        for r in &self.rows {
            match (&r.report, &r.failure) {
                (Some(rep), _) => {
                    let delta = r.delta.map_or("-".to_string(), |d| format!("{d:+.4}"));
                    let _ = writeln!(out, "{:<12} {:>10.4} {:>10}", r.tag, rep.total_auc, delta);
                }
                (None, Some(f)) => {
                    let _ = writeln!(out, "{:<12} {:>10} {:>10}  failed: {f}", r.tag, "-", "-");
                }
                (None, None) => {}
            }
        }
        let bucket_labels: Vec<String> = self
            .rows
            .iter()
            .find_map(|r| r.report.as_ref())
            .map(|r| r.buckets.iter().map(|b| b.bucket.clone()).collect())
            .unwrap_or_default();
        let drops: Vec<&AblationRow> = self
            .rows
            .iter()
            .filter(|r| matches!(r.tag.as_str(), "no_id" | "no_stats" | "no_mm") && r.report.is_some())
            .collect();
        if !drops.is_empty() {
            let _ = write!(out, "\nper-bucket AUC change vs full\n{:<12}", "model");
            for l in &bucket_labels {
                let _ = write!(out, " {:>14}", l);
            }
            out.push('\n');
            for r in drops {
                let _ = write!(out, "{:<12}", r.tag);
                for d in &r.bucket_deltas {
                    match d {
                        Some(x) => {
                            let _ = write!(out, " {:>14}", format!("{x:+.4}"));
                        }
                        None => {
                            let _ = write!(out, " {:>14}", "undefined");
                        }
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}
