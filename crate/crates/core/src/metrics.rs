//! Pixel-level segmentation metrics.
//!
//! IoU is overlap over union, DSC is twice the overlap over the summed
//! foreground sizes, accuracy is the fraction of correctly labelled pixels.
//! When both masks are empty IoU and DSC are 0/0; they are defined as `1.0`
//! there (predicting no wound where there is none is a correct outcome).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::Mask;
use crate::tensor::{Scalar, Tensor};

/// Pixel counts of a prediction against ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Result<f64> {
        accuracy(self)
    }

    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn dsc(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    pub fn triple(&self) -> Result<MetricTriple> {
        Ok(MetricTriple {
            acc: self.accuracy()?,
            iou: self.iou(),
            dsc: self.dsc(),
        })
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            tn: self.tn + o.tn,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub acc: f64,
    pub iou: f64,
    pub dsc: f64,
}

impl MetricTriple {
    /// Componentwise arithmetic mean.
    pub fn mean(items: &[MetricTriple]) -> Result<MetricTriple> {
        if items.is_empty() {
            return Err(Error::data("cannot average an empty metric list"));
        }
        let n = items.len() as f64;
        Ok(MetricTriple {
            acc: items.iter().map(|m| m.acc).sum::<f64>() / n,
            iou: items.iter().map(|m| m.iou).sum::<f64>() / n,
            dsc: items.iter().map(|m| m.dsc).sum::<f64>() / n,
        })
    }
}

/// Threshold an `N×1×H×W` probability map into `N` masks; `p ≥ threshold`
/// maps to foreground.
pub fn binarize<T: Scalar>(prob: &Tensor<T>, threshold: f64) -> Result<Vec<Mask>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::param(format!(
            "threshold {threshold} must lie in (0, 1)"
        )));
    }
    let (n, c, h, w) = prob.dims4()?;
    if c != 1 {
        return Err(Error::param(format!(
            "binarize expects one channel, got {c}"
        )));
    }
    Ok(prob
        .data()
        .chunks(h * w)
        .take(n)
        .map(|plane| {
            let data = plane.iter().map(|&p| (p.as_f64() >= threshold) as u8).collect();
            Mask::new(h, w, data).expect("thresholded values are binary")
        })
        .collect())
}

pub fn confusion_counts(pred: &Mask, truth: &Mask) -> Result<Confusion> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::data(format!(
            "mask dims differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p, t) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::data("mask is not binary")),
        }
    }
    Ok(c)
}

/// `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(c: &Confusion) -> Result<f64> {
    let total = c.total();
    if total == 0 {
        return Err(Error::param("accuracy of an empty confusion"));
    }
    Ok((c.tp + c.tn) as f64 / total as f64)
}

pub fn iou(pred: &Mask, truth: &Mask) -> Result<f64> {
    Ok(confusion_counts(pred, truth)?.iou())
}

pub fn dsc(pred: &Mask, truth: &Mask) -> Result<f64> {
    Ok(confusion_counts(pred, truth)?.dsc())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_case() -> (Mask, Mask) {
        // 4x4, pred covers the top-left 2x2, truth the top row's middle 2x2 block.
        let pred = Mask::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let truth = Mask::from_fn(4, 4, |y, x| y < 2 && (1..3).contains(&x));
        (pred, truth)
    }

    #[test]
    fn hand_counts() {
        let (p, t) = hand_case();
        let c = confusion_counts(&p, &t).unwrap();
        assert_eq!(
            c,
            Confusion {
                tp: 2,
                tn: 10,
                fp: 2,
                fn_: 2
            }
        );
        assert_eq!(accuracy(&c).unwrap(), 0.75);
        assert!((iou(&p, &t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&p, &t).unwrap(), 0.5);
    }

    #[test]
    fn identity_complement_and_swap() {
        let (p, t) = hand_case();
        let same = confusion_counts(&t, &t).unwrap();
        assert_eq!((same.tp, same.tn, same.fp, same.fn_), (4, 12, 0, 0));
        assert_eq!(same.accuracy().unwrap(), 1.0);
        assert_eq!(iou(&t, &t).unwrap(), 1.0);
        assert_eq!(dsc(&t, &t).unwrap(), 1.0);

        let inv = Mask::from_fn(4, 4, |y, x| !t.get(y, x));
        assert_eq!(confusion_counts(&inv, &t).unwrap().accuracy().unwrap(), 0.0);
        assert_eq!(iou(&inv, &t).unwrap(), 0.0);

        let a = confusion_counts(&p, &t).unwrap();
        let b = confusion_counts(&t, &p).unwrap();
        assert_eq!((a.tp, a.tn, a.fp, a.fn_), (b.tp, b.tn, b.fn_, b.fp));
    }

    #[test]
    fn empty_masks_score_one() {
        let z = Mask::zeros(3, 3);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
        assert_eq!(dsc(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            confusion_counts(&Mask::zeros(2, 2), &Mask::zeros(2, 3)),
            Err(Error::Data(_))
        ));
        assert!(matches!(accuracy(&Confusion::default()), Err(Error::Param(_))));
        let p = Tensor::<f64>::full([1, 1, 2, 2], 0.3);
        assert!(matches!(binarize(&p, 1.0), Err(Error::Param(_))));
        assert!(matches!(binarize(&p, 0.0), Err(Error::Param(_))));
    }

    #[test]
    fn binarize_tie_maps_to_foreground() {
        let p = Tensor::<f64>::new([1, 1, 1, 3], vec![0.5, 0.49, 0.51]).unwrap();
        let m = binarize(&p, 0.5).unwrap();
        assert_eq!(m[0].data(), &[1, 0, 1]);
        let low = Tensor::<f64>::full([2, 1, 2, 2], 0.2);
        assert!(binarize(&low, 0.5).unwrap().iter().all(|m| m.count() == 0));
    }
}
