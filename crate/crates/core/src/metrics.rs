//! Segmentation metrics from a confusion matrix.

use serde::Serialize;
use vidseg_tensor::Tensor;

use crate::error::{dim_err, param_err, Result};
use crate::report::{sig6, sig6_opt, sig6_vec};

/// Accumulates `classes × classes` counts indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    ignore: u32,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize, ignore: u32) -> Self {
        Self {
            classes,
            ignore,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &Tensor<u32>, gt: &Tensor<u32>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return dim_err(format!("prediction {:?} vs labels {:?}", pred.shape(), gt.shape()));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == self.ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return param_err(format!("label {} out of range for {} classes", p.max(g), self.classes));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn report(&self) -> Result<MetricsReport> {
        let k = self.classes;
        let mut per_class = Vec::with_capacity(k);
        for j in 0..k {
            let tp = self.count(j, j);
            let gt_j: u64 = (0..k).map(|p| self.count(j, p)).sum();
            let pred_j: u64 = (0..k).map(|g| self.count(g, j)).sum();
            let union = gt_j + pred_j - tp;
            per_class.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        if valid.is_empty() {
            return param_err("no valid classes to average");
        }
        let total: u64 = self.counts.iter().sum();
        let correct: u64 = (0..k).map(|j| self.count(j, j)).sum();
        Ok(MetricsReport {
            miou: valid.iter().sum::<f64>() / valid.len() as f64,
            pixel_accuracy: correct as f64 / total as f64,
            per_class_iou: per_class,
            loss_curve: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    /// `None` for classes absent from both prediction and labels.
    #[serde(serialize_with = "serialize_iou")]
    pub per_class_iou: Vec<Option<f64>>,
    #[serde(serialize_with = "sig6")]
    pub miou: f64,
    #[serde(serialize_with = "sig6")]
    pub pixel_accuracy: f64,
    #[serde(serialize_with = "sig6_vec")]
    pub loss_curve: Vec<f64>,
}

fn serialize_iou<S: serde::Serializer>(v: &[Option<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        struct W(Option<f64>);
        impl Serialize for W {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                sig6_opt(&self.0, s)
            }
        }
        seq.serialize_element(&W(*x))?;
    }
    seq.end()
}

/// mIoU and pixel accuracy of one prediction.
pub fn eval_miou(pred: &Tensor<u32>, gt: &Tensor<u32>, classes: usize, ignore: u32) -> Result<MetricsReport> {
    let mut c = Confusion::new(classes, ignore);
    c.add(pred, gt)?;
    c.report()
}
