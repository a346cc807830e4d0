//! Checkpoint evaluation: forward passes, argmax masks, per-class DSC and
//! HD95 against ground truth, reported under both aggregation orders.

use serde::{Deserialize, Serialize};

use mlla_core::metrics::{dsc, hd95, logits_to_mask, LabelMask};
use mlla_core::network::Model;
use mlla_core::{Graph, Tensor};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u16,
    pub dsc: f64,
    /// None when the class is absent from prediction or truth.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub index: usize,
    pub classes: Vec<ClassMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassSummary {
    pub class: u16,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
    pub hd95_defined_cases: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseReport>,
    pub per_class: Vec<PerClassSummary>,
    /// Mean over cases of each case's mean foreground DSC.
    pub mean_foreground_dsc_case_first: f64,
    /// Mean over foreground classes of each class's mean DSC over cases.
    pub mean_foreground_dsc_class_first: f64,
}

/// Run the model over every sample and score the argmax masks.
pub fn evaluate(model: &Model<f32>, dataset: &[(Tensor<f32>, LabelMask)]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(CliError::Validation("empty evaluation dataset".into()));
    }
    let classes = model.config.classes as u16;
    let mut cases = Vec::with_capacity(dataset.len());
    for (index, (image, gt)) in dataset.iter().enumerate() {
        if image.shape()[1] != gt.height() || image.shape()[2] != gt.width() {
            return Err(CliError::Validation(format!(
                "case {index}: image {:?} does not match mask {}x{}",
                image.shape(),
                gt.height(),
                gt.width()
            )));
        }
        let shape = image.shape().to_vec();
        let mut g = Graph::new(&model.params);
        let batched = image
            .clone()
            .reshape(vec![1, shape[0], shape[1], shape[2]])?;
        let img_var = g.tape.constant(batched)?;
        let logits = model.forward(&mut g, img_var)?;
        let ls = g.tape.shape(logits).to_vec();
        let single = g
            .tape
            .value(logits)
            .clone()
            .reshape(vec![ls[1], ls[2], ls[3]])?;
        drop(g);
        let pred = logits_to_mask(&single, gt.spacing())?;

        let mut per_class = Vec::new();
        for c in 0..classes {
            let d = dsc(&pred, gt, c)?;
            let h = match hd95(&pred, gt, c) {
                Ok(v) => Some(v),
                Err(mlla_core::Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e.into()),
            };
            per_class.push(ClassMetrics {
                class: c,
                dsc: d,
                hd95: h,
            });
        }
        cases.push(CaseReport {
            index,
            classes: per_class,
        });
    }

    // per-class means over cases
    let mut per_class = Vec::new();
    for c in 0..classes {
        let dscs: Vec<f64> = cases
            .iter()
            .map(|case| case.classes[c as usize].dsc)
            .collect();
        let hds: Vec<f64> = cases
            .iter()
            .filter_map(|case| case.classes[c as usize].hd95)
            .collect();
        per_class.push(PerClassSummary {
            class: c,
            mean_dsc: mean(&dscs),
            mean_hd95: if hds.is_empty() { None } else { Some(mean(&hds)) },
            hd95_defined_cases: hds.len(),
        });
    }

    let case_first = mean(
        &cases
            .iter()
            .map(|case| {
                mean(
                    &case.classes[1..]
                        .iter()
                        .map(|m| m.dsc)
                        .collect::<Vec<_>>(),
                )
            })
            .collect::<Vec<_>>(),
    );
    let class_first = mean(
        &per_class[1..]
            .iter()
            .map(|s| s.mean_dsc)
            .collect::<Vec<_>>(),
    );

    Ok(EvalReport {
        cases,
        per_class,
        mean_foreground_dsc_case_first: case_first,
        mean_foreground_dsc_class_first: class_first,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Text rendering carrying the same numbers as the JSON.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>6} {:>10} {:>12} {:>14}\n",
        "class", "mean_dsc", "mean_hd95", "hd95_cases"
    ));
    for s in &report.per_class {
        out.push_str(&format!(
            "{:>6} {:>10.4} {:>12} {:>14}\n",
            s.class,
            s.mean_dsc,
            s.mean_hd95
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "undefined".into()),
            s.hd95_defined_cases
        ));
    }
    out.push_str(&format!(
        "mean foreground DSC: {:.4} (case-first) / {:.4} (class-first) over {} cases\n",
        report.mean_foreground_dsc_case_first,
        report.mean_foreground_dsc_class_first,
        report.cases.len()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlla_core::network::{build_model, ModelConfig};

    #[test]
    fn untrained_checkpoint_evaluates_without_error() {
        let model = build_model::<f32>(&ModelConfig::micro(), 0).unwrap();
        let img = Tensor::<f32>::from_fn(&[1, 16, 16], |i| (i as f32 * 0.01).cos());
        let mask = LabelMask::new(
            (0..256).map(|i| (i % 2) as u16).collect(),
            16,
            16,
            (1.0, 1.0),
        )
        .unwrap();
        let report = evaluate(&model, &[(img, mask)]).unwrap();
        assert_eq!(report.cases.len(), 1);
        assert_eq!(report.per_class.len(), 2);
        let text = render_text(&report);
        assert!(text.contains("class"));
    }
}
