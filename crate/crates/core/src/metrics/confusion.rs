use std::fmt::Write as _;

use crate::cloud::SemanticClassMap;
use crate::error::{PctError, Result};

/// Square count matrix indexed by raw class id: rows are ground truth,
/// columns predictions. Points whose ground truth is the ignore id are
/// never accumulated; a prediction of the ignore id counts as a miss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    size: usize,
    ignore_id: u32,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    /// `(class id, IoU)` for every class with a non-empty union.
    pub per_class: Vec<(u32, f64)>,
    pub mean: f64,
}

impl ConfusionMatrix {
    /// Matrix covering class ids `0..size`.
    pub fn new(size: usize, ignore_id: u32) -> Self {
        Self {
            size,
            ignore_id,
            counts: vec![0; size * size],
        }
    }

    pub fn for_map(map: &SemanticClassMap) -> Self {
        Self::new(map.max_id() as usize + 1, map.ignore_id())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, truth: u32, pred: u32) -> u64 {
        self.counts[truth as usize * self.size + pred as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: u32, pred: u32, count: u64) -> Result<()> {
        for id in [truth, pred] {
            if id as usize >= self.size {
                return Err(PctError::parameter(
                    "label",
                    format!("class id {id} outside confusion matrix of size {}", self.size),
                ));
            }
        }
        if truth != self.ignore_id {
            self.counts[truth as usize * self.size + pred as usize] += count;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, truth: &[u32], pred: &[u32]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(PctError::CountMismatch {
                expected: truth.len(),
                found: pred.len(),
            });
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.add(t, p, 1)?;
        }
        Ok(())
    }

    fn class_stats(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.counts[c * self.size + c];
        let row: u64 = self.counts[c * self.size..(c + 1) * self.size].iter().sum();
        let col: u64 = (0..self.size).map(|r| self.counts[r * self.size + c]).sum();
        (tp, col - tp, row - tp)
    }

    /// Intersection over union per class, averaged over classes whose union
    /// is non-empty. The ignore class is never scored.
    pub fn miou(&self) -> Result<IouReport> {
        if self.total() == 0 {
            return Err(PctError::UndefinedMetric("confusion matrix is empty".into()));
        }
        let mut per_class = Vec::new();
        for c in 0..self.size {
            if c as u32 == self.ignore_id {
                continue;
            }
            let (tp, fp, fn_) = self.class_stats(c);
            let union = tp + fp + fn_;
            if union > 0 {
                per_class.push((c as u32, tp as f64 / union as f64));
            }
        }
        let mean = per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64;
        Ok(IouReport { per_class, mean })
    }

    /// One row per scored class (`name tp fp fn iou`) and a final `mean` row.
    pub fn report(&self, map: &SemanticClassMap) -> Result<String> {
        let iou = self.miou()?;
        let mut out = String::from("class,tp,fp,fn,iou\n");
        for &(c, v) in &iou.per_class {
            let (tp, fp, fn_) = self.class_stats(c as usize);
            let name = map.get(c).map_or_else(|| format!("class{c}"), |e| e.name.clone());
            let _ = writeln!(out, "{name},{tp},{fp},{fn_},{v:.6}");
        }
        let _ = writeln!(out, "mean,,,,{:.6}", iou.mean);
        Ok(out)
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    cm.miou()
}
