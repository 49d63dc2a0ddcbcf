//! Confusion-matrix IoU metrics.

use crate::error::{OtocError, Result};

/// `counts[gt * C + pred]`, over labeled ground-truth points only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    c: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_categories: usize) -> Self {
        Confusion { c: num_categories, counts: vec![0; num_categories * num_categories] }
    }

    pub fn add(&mut self, pred: &[u32], gt: &[Option<u32>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(OtocError::validation(format!(
                "{} predictions for {} ground-truth points",
                pred.len(),
                gt.len()
            )));
        }
        for (&p, g) in pred.iter().zip(gt) {
            let Some(g) = g else { continue };
            if p as usize >= self.c || *g as usize >= self.c {
                return Err(OtocError::validation(format!("category out of range 0..{}", self.c)));
            }
            self.counts[*g as usize * self.c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> Metrics {
        self.metrics_over(self.c)
    }

    /// Metrics for categories `0..k` only; higher ids still count as errors.
    pub fn metrics_over(&self, k: usize) -> Metrics {
        let c = self.c;
        let iou: Vec<Option<f64>> = (0..k.min(c))
            .map(|k| {
                let tp = self.counts[k * c + k];
                let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| self.counts[k * c + p]).sum();
                let fp: u64 = (0..c).filter(|&g| g != k).map(|g| self.counts[g * c + k]).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let defined: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if defined.is_empty() { 0.0 } else { defined.iter().sum::<f64>() / defined.len() as f64 };
        Metrics { iou, miou }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `None` when the category is absent from both prediction and ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn miou(pred: &[u32], gt: &[Option<u32>], num_categories: usize) -> Result<Metrics> {
    let mut cm = Confusion::new(num_categories);
    cm.add(pred, gt)?;
    Ok(cm.metrics())
}
