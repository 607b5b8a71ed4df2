//! Overlap metrics on binary masks and the evaluation record.

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaskMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Two empty masks score 1 on everything; an empty side otherwise makes the
/// ratios with it in the denominator 0.
pub fn mask_metrics(pred: &[u8], gt: &[u8]) -> Result<MaskMetrics> {
    if pred.len() != gt.len() {
        invalid!("mask sizes differ: {} vs {}", pred.len(), gt.len());
    }
    if pred.iter().chain(gt).any(|&v| v > 1) {
        invalid!("masks must be binary");
    }
    let (mut tp, mut np, mut ny) = (0usize, 0usize, 0usize);
    for (&p, &y) in pred.iter().zip(gt) {
        tp += usize::from(p & y);
        np += usize::from(p);
        ny += usize::from(y);
    }
    if np == 0 && ny == 0 {
        return Ok(MaskMetrics { dice: 1.0, iou: 1.0, precision: 1.0, recall: 1.0 });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MaskMetrics {
        dice: ratio(2 * tp, np + ny),
        iou: ratio(tp, np + ny - tp),
        precision: ratio(tp, np),
        recall: ratio(tp, ny),
    })
}

impl MaskMetrics {
    pub fn mean(items: &[MaskMetrics]) -> MaskMetrics {
        let n = items.len().max(1) as f64;
        let mut m = MaskMetrics::default();
        for x in items {
            m.dice += x.dice;
            m.iou += x.iou;
            m.precision += x.precision;
            m.recall += x.recall;
        }
        MaskMetrics { dice: m.dice / n, iou: m.iou / n, precision: m.precision / n, recall: m.recall / n }
    }
}

/// One evaluation, serialized as a single JSON line.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalRecord {
    pub split: String,
    pub n: usize,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    /// Top-1 accuracy in category order: infection, num, left loc, right loc.
    pub retrieval_top1: [f64; 4],
}

impl EvalRecord {
    pub fn mean_retrieval(&self) -> f64 {
        self.retrieval_top1.iter().sum::<f64>() / 4.0
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data serializes")
    }
}
