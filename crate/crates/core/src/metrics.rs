//! Denormalized evaluation and model comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{predict_sequence, Adjacency, ForwardCtx, ModelError};
use crate::pbpk::{ConcentrationTensor, DataError, SplitPart};
use crate::tensor::Tape;
use crate::train::ModelCheckpoint;
use crate::SCHEMA_VERSION;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("prediction and target lengths differ ({pred} vs {target})")]
    Length { pred: usize, target: usize },
    #[error("metrics need at least {0} values")]
    TooShort(usize),
    #[error("R² is undefined for a constant target")]
    ConstantTarget,
    #[error("checkpoint was trained on dataset seed {checkpoint}, dataset has seed {dataset}")]
    SeedMismatch { checkpoint: u64, dataset: u64 },
    #[error("cannot compare reports from dataset seeds {0} and {1}")]
    MixedSeeds(u64, u64),
    #[error("cannot compare reports from splits `{0}` and `{1}`")]
    MixedSplits(String, String),
    #[error("comparison needs at least 2 reports, got {0}")]
    TooFewReports(usize),
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check(pred: &[f64], target: &[f64], min: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(MetricError::Length {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.len() < min {
        return Err(MetricError::TooShort(min));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target, 1)?;
    let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target, 1)?;
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(s / pred.len() as f64)
}

/// `1 − SS_res/SS_tot`, with `SS_tot` about the target mean.
pub fn r2(pred: &[f64], target: &[f64]) -> Result<f64> {
    check(pred, target, 2)?;
    let mean = target.iter().sum::<f64>() / target.len() as f64;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ConstantTarget);
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganMetrics {
    pub organ: String,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when the organ's targets are constant.
    pub r2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub model: String,
    pub split: String,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub n_samples: usize,
    pub per_organ: Vec<OrganMetrics>,
    #[serde(default)]
    pub checkpoint: Option<String>,
    pub dataset_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

/// One denormalized next-step prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub drug_id: usize,
    /// Time index of the target.
    pub t: usize,
    pub organ: String,
    pub target: f64,
    pub prediction: f64,
}

/// Teacher-forced predictions for every `(drug, t ≥ 1, organ)` of the
/// chosen split, mapped back to mg/L with the checkpoint's statistics.
pub fn predict(checkpoint: &ModelCheckpoint, data: &ConcentrationTensor, part: SplitPart) -> Result<Vec<PredictionRow>> {
    if checkpoint.dataset_seed != data.seed {
        return Err(MetricError::SeedMismatch {
            checkpoint: checkpoint.dataset_seed,
            dataset: data.seed,
        });
    }
    if checkpoint.organs != data.organ_names() {
        return Err(DataError::OrganMismatch {
            expected: checkpoint.organs.clone(),
            got: data.organ_names(),
        }
        .into());
    }
    checkpoint.norm.check_compatible(data)?;
    let drugs = checkpoint.split.part(part);
    if drugs.is_empty() {
        return Err(MetricError::EmptySplit(part.name()));
    }
    let adjacency = Adjacency::from_graph(&data.graph);
    let organs = data.organ_names();
    let (_, nt, no) = data.shape();
    let seqs = checkpoint.norm.sequences(data, drugs);
    let mut rows = Vec::with_capacity(drugs.len() * (nt - 1) * no);
    for seq in &seqs {
        let mut tape = Tape::new();
        let bound = checkpoint.params.bind(&mut tape, false);
        let mut ctx = ForwardCtx {
            config: &checkpoint.model,
            adjacency: &adjacency,
            dropout_rng: None,
        };
        let pred = predict_sequence(&mut tape, &bound, &mut ctx, seq)?;
        let pred = tape.value(pred);
        for t in 1..nt {
            for (o, organ) in organs.iter().enumerate() {
                let z = pred.get(t - 1, o);
                rows.push(PredictionRow {
                    drug_id: seq.drug,
                    t,
                    organ: organ.clone(),
                    target: data.get(seq.drug, t, o),
                    prediction: checkpoint.norm.denormalize(seq.drug, o, z),
                });
            }
        }
    }
    Ok(rows)
}

/// Pooled and per-organ metrics over prediction rows.
pub fn report_from_rows(
    model: &str,
    split: &str,
    dataset_seed: u64,
    organs: &[String],
    rows: &[PredictionRow],
) -> Result<MetricsReport> {
    let pred: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
    let target: Vec<f64> = rows.iter().map(|r| r.target).collect();
    let mut per_organ = Vec::with_capacity(organs.len());
    for organ in organs {
        let (p, t): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| &r.organ == organ)
            .map(|r| (r.prediction, r.target))
            .unzip();
        if p.is_empty() {
            continue;
        }
        per_organ.push(OrganMetrics {
            organ: organ.clone(),
            rmse: rmse(&p, &t)?,
            mae: mae(&p, &t)?,
            r2: r2(&p, &t).ok(),
        });
    }
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        model: model.to_string(),
        split: split.to_string(),
        rmse: rmse(&pred, &target)?,
        mae: mae(&pred, &target)?,
        r2: r2(&pred, &target)?,
        n_samples: rows.len(),
        per_organ,
        checkpoint: None,
        dataset_seed,
        run_config: None,
    })
}

/// Evaluates a checkpoint on one split; returns the report and the rows it
/// was computed from.
pub fn evaluate(
    checkpoint: &ModelCheckpoint,
    data: &ConcentrationTensor,
    part: SplitPart,
) -> Result<(MetricsReport, Vec<PredictionRow>)> {
    let rows = predict(checkpoint, data, part)?;
    let report = report_from_rows(
        checkpoint.model.kind.name(),
        part.name(),
        data.seed,
        &data.organ_names(),
        &rows,
    )?;
    Ok((report, rows))
}

/// Prediction dump, `drug_id,t,organ,target,prediction`.
pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut s = String::from("drug_id,t,organ,target,prediction\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.drug_id, r.t, r.organ, r.target, r.prediction);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    /// Highest R² in the table.
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub dataset_seed: u64,
    pub split: String,
    pub rows: Vec<ComparisonRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

/// Rows sorted by R² descending (ties by model name); the first row is
/// flagged best.
pub fn compare(reports: &[MetricsReport]) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(MetricError::TooFewReports(reports.len()));
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.dataset_seed != first.dataset_seed {
            return Err(MetricError::MixedSeeds(first.dataset_seed, r.dataset_seed));
        }
        if r.split != first.split {
            return Err(MetricError::MixedSplits(first.split.clone(), r.split.clone()));
        }
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            rmse: r.rmse,
            mae: r.mae,
            r2: r.r2,
            best: false,
        })
        .collect();
    rows.sort_by(|a, b| b.r2.total_cmp(&a.r2).then_with(|| a.model.cmp(&b.model)));
    rows[0].best = true;
    Ok(ComparisonTable {
        schema_version: SCHEMA_VERSION,
        dataset_seed: first.dataset_seed,
        split: first.split.clone(),
        rows,
        run_config: None,
    })
}

impl ComparisonTable {
    /// Aligned plain-text table; the best row is marked with `*`.
    pub fn render_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "Performance comparison (dataset seed {}, {} split)\n",
            self.dataset_seed, self.split
        );
        let _ = writeln!(s, "  {:<width$}  {:>12}  {:>12}  {:>8}", "Model", "RMSE", "MAE", "R2");
        for r in &self.rows {
            let mark = if r.best { '*' } else { ' ' };
            let _ = writeln!(
                s,
                "{mark} {:<width$}  {:>12.6}  {:>12.6}  {:>8.4}",
                r.model, r.rmse, r.mae, r.r2
            );
        }
        s
    }

    /// Underlying data of the bar chart, one line per bar.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("model,metric,value\n");
        for r in &self.rows {
            for (m, v) in [("rmse", r.rmse), ("mae", r.mae), ("r2", r.r2)] {
                let _ = writeln!(s, "{},{m},{v}", r.model);
            }
        }
        s
    }

    /// Grouped bar chart: one group per model, one bar per metric. Bars of
    /// a metric are scaled to that metric's largest absolute value.
    pub fn to_svg(&self) -> String {
        const METRICS: [(&str, &str); 3] = [("rmse", "#4e79a7"), ("mae", "#f28e2b"), ("r2", "#59a14f")];
        let (w, h) = (640.0, 360.0);
        let (left, bottom, top) = (50.0, 300.0, 40.0);
        let plot_h = bottom - top;
        let group_w = (w - left - 20.0) / self.rows.len().max(1) as f64;
        let bar_w = group_w / 4.0;
        let value = |r: &ComparisonRow, m: &str| match m {
            "rmse" => r.rmse,
            "mae" => r.mae,
            _ => r.r2,
        };
        let scale: Vec<f64> = METRICS
            .iter()
            .map(|(m, _)| {
                self.rows
                    .iter()
                    .map(|r| value(r, m).abs())
                    .fold(0.0, f64::max)
                    .max(f64::MIN_POSITIVE)
            })
            .collect();

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Performance comparison (seed {}, {} split)</text>"#,
            w / 2.0,
            self.dataset_seed,
            self.split
        );
        let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, w - 20.0);
        for (g, r) in self.rows.iter().enumerate() {
            let gx = left + g as f64 * group_w;
            let _ = writeln!(s, r#"<g class="model-group" data-model="{}">"#, r.model);
            for (k, (m, color)) in METRICS.iter().enumerate() {
                let v = value(r, m);
                let bh = (v.max(0.0) / scale[k]) * plot_h;
                let x = gx + bar_w * (0.5 + k as f64);
                let y = bottom - bh;
                let _ = writeln!(
                    s,
                    r#"  <rect class="bar" data-metric="{m}" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="{color}"/>"#,
                    bar_w * 0.9
                );
                let _ = writeln!(
                    s,
                    r#"  <text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{v:.4}</text>"#,
                    x + bar_w * 0.45,
                    y - 3.0
                );
            }
            let label = if r.best { format!("{} (best R²)", r.model) } else { r.model.clone() };
            let _ = writeln!(
                s,
                r#"  <text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#,
                gx + group_w / 2.0,
                bottom + 16.0
            );
            s.push_str("</g>\n");
        }
        for (k, (m, color)) in METRICS.iter().enumerate() {
            let x = left + k as f64 * 110.0;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
                bottom + 32.0,
                x + 14.0,
                bottom + 41.0,
                m.to_uppercase()
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_derived_values() {
        assert!((rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap() - 3.535534).abs() < 1e-6);
        assert_eq!(mae(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 3.5);
        assert!((r2(&[1.0, 2.0, 4.0], &[1.0, 2.0, 3.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_mean_predictions() {
        let t = [1.0, 4.0, 2.0, 8.0];
        assert_eq!(rmse(&t, &t).unwrap(), 0.0);
        assert_eq!(mae(&t, &t).unwrap(), 0.0);
        assert_eq!(r2(&t, &t).unwrap(), 1.0);
        assert_eq!(r2(&[3.75; 4], &t).unwrap(), 0.0);
    }

    #[test]
    fn error_cases() {
        assert!(matches!(r2(&[1.0, 2.0], &[3.0, 3.0]), Err(MetricError::ConstantTarget)));
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(MetricError::Length { .. })));
        assert!(matches!(mae(&[], &[]), Err(MetricError::TooShort(1))));
        assert!(matches!(r2(&[1.0], &[1.0]), Err(MetricError::TooShort(2))));
    }

    fn report(model: &str, r2: f64, seed: u64) -> MetricsReport {
        MetricsReport {
            schema_version: SCHEMA_VERSION,
            model: model.into(),
            split: "test".into(),
            rmse: 1.0 - r2,
            mae: 0.5 - r2 / 2.0,
            r2,
            n_samples: 10,
            per_organ: vec![],
            checkpoint: None,
            dataset_seed: seed,
            run_config: None,
        }
    }

    #[test]
    fn compare_sorts_and_flags() {
        let t = compare(&[report("mlp", 0.8, 1), report("gnn", 0.9, 1), report("lstm", 0.7, 1)]).unwrap();
        let names: Vec<&str> = t.rows.iter().map(|r| r.model.as_str()).collect();
        assert_eq!(names, ["gnn", "mlp", "lstm"]);
        assert!(t.rows[0].best && !t.rows[1].best && !t.rows[2].best);
        let text = t.render_text();
        assert!(text.contains("* gnn"));
        let svg = t.to_svg();
        assert_eq!(svg.matches("class=\"model-group\"").count(), 3);
        assert_eq!(svg.matches("class=\"bar\"").count(), 9);
    }

    #[test]
    fn compare_ties_and_refusals() {
        let t = compare(&[report("b", 0.5, 1), report("a", 0.5, 1)]).unwrap();
        assert_eq!(t.rows[0].model, "a");
        let dup = compare(&[report("x", 0.5, 1), report("x", 0.5, 1)]).unwrap();
        assert_eq!(dup.rows[0].model, dup.rows[1].model);
        assert_eq!(dup.rows[0].r2, dup.rows[1].r2);
        assert!(matches!(
            compare(&[report("a", 0.5, 1), report("b", 0.5, 2)]),
            Err(MetricError::MixedSeeds(1, 2))
        ));
        assert!(matches!(compare(&[report("a", 0.5, 1)]), Err(MetricError::TooFewReports(1))));
    }
}
