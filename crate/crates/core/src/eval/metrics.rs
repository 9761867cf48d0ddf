//! Confusion matrix with IoU-based summaries.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::pointcloud::Label;

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Label,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    /// `None` for classes absent from both ground truth and predictions.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub acc: f64,
    pub fwiou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Label) -> Self {
        Self { classes, ignore, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per `(pred, gt)` pair; pairs whose ground truth is
    /// the ignore label are skipped.
    pub fn accumulate(&mut self, preds: &[Label], gts: &[Label]) -> Result<()> {
        if preds.len() != gts.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), gts.len())));
        }
        let k = self.classes;
        if let Some((p, g)) = preds
            .iter()
            .zip(gts)
            .find(|(&p, &g)| g != self.ignore && (p as usize >= k || g as usize >= k))
        {
            return Err(Error::format(format!("label pair ({g}, {p}) out of range for {k} classes")));
        }
        for (&p, &g) in preds.iter().zip(gts) {
            if g != self.ignore {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("confusion matrices differ in class count"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn marginals(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let gt: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let pred: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
        (tp, gt - tp, pred - tp)
    }

    /// `TP / (TP + FP + FN)` per class.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let (tp, fn_, fp) = self.marginals(c);
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Per-class IoU and their mean over scored classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion matrix has no counts".into()));
        }
        let iou = self.class_iou();
        let scored: Vec<f64> = iou.iter().flatten().copied().collect();
        let mean = scored.iter().sum::<f64>() / scored.len() as f64;
        Ok((iou, mean))
    }

    /// Overall accuracy and ground-truth frequency weighted IoU.
    pub fn acc_fwiou(&self) -> Result<(f64, f64)> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix has no counts".into()));
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        let mut fw = 0.0;
        for (c, iou) in self.class_iou().into_iter().enumerate() {
            let (tp, fn_, _) = self.marginals(c);
            if let Some(iou) = iou {
                fw += (tp + fn_) as f64 / total as f64 * iou;
            }
        }
        Ok((trace as f64 / total as f64, fw))
    }

    pub fn scores(&self) -> Result<ClassScores> {
        let (iou, miou) = self.miou()?;
        let (acc, fwiou) = self.acc_fwiou()?;
        Ok(ClassScores { iou, miou, acc, fwiou })
    }

    /// Fixed-width table of per-class IoU and the summaries.
    pub fn table(&self) -> Result<String> {
        let s = self.scores()?;
        let mut out = String::from("class      iou\n");
        for (c, iou) in s.iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("{c:<8} {v:>6.4}\n")),
                None => out.push_str(&format!("{c:<8}      -\n")),
            }
        }
        out.push_str(&format!("mIoU     {:>6.4}\nAcc      {:>6.4}\nfwIoU    {:>6.4}\n", s.miou, s.acc, s.fwiou));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_is_diagonal() {
        let mut cm = ConfusionMatrix::new(3, 255);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(cm.get(2, 2), 2);
        assert_eq!(cm.total(), 4);
        let s = cm.scores().unwrap();
        assert_eq!((s.miou, s.acc, s.fwiou), (1.0, 1.0, 1.0));
    }

    #[test]
    fn four_point_example() {
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.get(0, 1), 1);
        let (iou, m) = cm.miou().unwrap();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((m - 7.0 / 12.0).abs() < 1e-15);
        let (acc, fw) = cm.acc_fwiou().unwrap();
        assert_eq!(acc, 0.75);
        assert!((fw - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(4, 255);
        cm.accumulate(&[1, 1, 3], &[1, 1, 3]).unwrap();
        let (iou, m) = cm.miou().unwrap();
        assert_eq!(iou[0], None);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn ignore_and_errors() {
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.accumulate(&[1, 7], &[1, 255]).unwrap();
        assert_eq!(cm.total(), 1);
        assert!(cm.accumulate(&[2], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
        assert!(ConfusionMatrix::new(2, 255).miou().is_err());
    }

    #[test]
    fn merge_adds() {
        let mut a = ConfusionMatrix::new(2, 255);
        let mut b = ConfusionMatrix::new(2, 255);
        a.accumulate(&[0, 1], &[0, 0]).unwrap();
        b.accumulate(&[1], &[1]).unwrap();
        let mut whole = ConfusionMatrix::new(2, 255);
        whole.accumulate(&[0, 1, 1], &[0, 0, 1]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
        assert!(a.merge(&ConfusionMatrix::new(3, 255)).is_err());
    }

    #[test]
    fn single_class_fwiou_is_its_iou() {
        let mut cm = ConfusionMatrix::new(2, 255);
        cm.accumulate(&[0, 0, 1], &[0, 0, 0]).unwrap();
        let (iou, _) = cm.miou().unwrap();
        assert_eq!(cm.acc_fwiou().unwrap().1, iou[0].unwrap());
        assert!(cm.table().unwrap().contains("mIoU"));
    }
}
