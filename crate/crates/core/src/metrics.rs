//! Segmentation metrics: per-category IoU and its mean.

use crate::error::{Error, Result};
use crate::tensor::Labels;

/// Running intersection/union counts per category. Sums over samples, then
/// divides once, which is the usual dataset-level protocol.
#[derive(Debug, Clone)]
pub struct Confusion {
    classes: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
        }
    }

    pub fn update(&mut self, pred: &Labels, gt: &Labels, ignore_id: i32) -> Result<()> {
        if pred.shape != gt.shape {
            return Err(Error::ShapeMismatch {
                op: "miou",
                detail: format!("pred {:?} vs gt {:?}", pred.shape, gt.shape),
            });
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore_id || g < 0 {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::InvalidArgument(format!(
                    "category id out of range: pred {p}, gt {g}, C = {}",
                    self.classes
                )));
            }
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for c in 0..self.classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    /// Per-category IoU; `None` for categories absent from both pred and gt.
    pub fn per_category_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                if denom == 0 {
                    None
                } else {
                    Some(self.tp[c] as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean over categories that occur in gt or pred; absent categories are
    /// excluded rather than counted as 0 or 1.
    pub fn miou(&self) -> f64 {
        let ious: Vec<f64> = self.per_category_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return 0.0;
        }
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

/// Single-pair mIoU plus the per-category breakdown.
pub fn miou(pred: &Labels, gt: &Labels, classes: usize, ignore_id: i32) -> Result<(f64, Vec<Option<f64>>)> {
    let mut conf = Confusion::new(classes);
    conf.update(pred, gt, ignore_id)?;
    Ok((conf.miou(), conf.per_category_iou()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(vals: &[i32]) -> Labels {
        Labels::new(vec![vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = labels(&[0, 1, 2, 1]);
        let (m, _) = miou(&g, &g, 3, 255).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn disjoint_masks_score_zero() {
        let p = labels(&[0, 0]);
        let g = labels(&[1, 1]);
        let (m, _) = miou(&p, &g, 2, 255).unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn hand_enumerated_confusion_case() {
        // pred=[0,0,1,1], gt=[0,1,1,1]: IoU0 = 1/2, IoU1 = 2/3.
        let p = labels(&[0, 0, 1, 1]);
        let g = labels(&[0, 1, 1, 1]);
        let (m, per) = miou(&p, &g, 2, 255).unwrap();
        assert!((per[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((per[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m - 0.5833333333).abs() < 1e-9);
    }

    #[test]
    fn absent_categories_are_excluded_not_zeroed() {
        let p = labels(&[0, 0]);
        let g = labels(&[0, 0]);
        let (m, per) = miou(&p, &g, 5, 255).unwrap();
        assert_eq!(m, 1.0);
        assert!(per[1].is_none());
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let p = labels(&[0, 1]);
        let g = labels(&[0, 255]);
        let (m, _) = miou(&p, &g, 2, 255).unwrap();
        assert_eq!(m, 1.0);
    }
}
