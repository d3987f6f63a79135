//! Confusion-matrix segmentation metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{Error, Result};
use crate::image::SegmentationMap;

/// Which classes enter the means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeanOver {
    /// Classes present in truth or prediction.
    #[default]
    NonzeroUnion,
    AllClasses,
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate_labels(&mut self, truth: &[u16], pred: &[u16]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!("{} truth labels vs {} predictions", truth.len(), pred.len())));
        }
        let k = self.classes;
        if let Some(&bad) = truth.iter().chain(pred).find(|&&l| l as usize >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn accumulate(&mut self, truth: &SegmentationMap, pred: &SegmentationMap) -> Result<()> {
        if (truth.height(), truth.width()) != (pred.height(), pred.width()) {
            return Err(Error::Shape(format!(
                "truth {}×{} vs prediction {}×{}",
                truth.height(),
                truth.width(),
                pred.height(),
                pred.width()
            )));
        }
        self.accumulate_labels(truth.labels(), pred.labels())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!("merging {} classes into {}", other.classes, self.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// (TP, FP, FN) of class `c`.
    pub fn tallies(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    fn present(&self, c: usize) -> bool {
        let (tp, fp, fn_) = self.tallies(c);
        tp + fp + fn_ > 0
    }

    /// Per-class IoU; `None` where the class is absent from truth and prediction.
    pub fn iou(&self) -> Vec<Option<f64>> {
        self.per_class(|tp, fp, fn_| (tp, tp + fp + fn_))
    }

    pub fn f1(&self) -> Vec<Option<f64>> {
        self.per_class(|tp, fp, fn_| (2 * tp, 2 * tp + fp + fn_))
    }

    /// Per-class recall; `None` also when the class is absent from truth.
    pub fn acc(&self) -> Vec<Option<f64>> {
        self.per_class(|tp, _, fn_| (tp, tp + fn_))
    }

    fn per_class(&self, f: impl Fn(u64, u64, u64) -> (u64, u64)) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let (tp, fp, fn_) = self.tallies(c);
                let (num, den) = f(tp, fp, fn_);
                (den > 0).then(|| num as f64 / den as f64)
            })
            .collect()
    }

    fn mean(&self, values: Vec<Option<f64>>, over: MeanOver) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Data("metrics of an empty confusion matrix".into()));
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for (c, v) in values.into_iter().enumerate() {
            let include = match over {
                MeanOver::NonzeroUnion => self.present(c),
                MeanOver::AllClasses => true,
            };
            if include {
                sum += v.unwrap_or(0.0);
                n += 1;
            }
        }
        Ok(sum / n as f64)
    }

    pub fn miou(&self, over: MeanOver) -> Result<f64> {
        self.mean(self.iou(), over)
    }

    pub fn m_f1(&self, over: MeanOver) -> Result<f64> {
        self.mean(self.f1(), over)
    }

    pub fn m_acc(&self, over: MeanOver) -> Result<f64> {
        self.mean(self.acc(), over)
    }

    pub fn report(&self, over: MeanOver) -> Result<MetricsReport> {
        Ok(MetricsReport {
            per_class_iou: self.iou(),
            miou: self.miou(over)?,
            m_f1: self.m_f1(over)?,
            m_acc: self.m_acc(over)?,
            pixels: self.total(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub m_f1: f64,
    pub m_acc: f64,
    pub pixels: u64,
}

impl MetricsReport {
    /// `key=value` lines; absent classes print `na`.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (c, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "iou.{c}={v:.6}"),
                None => writeln!(s, "iou.{c}=na"),
            }
            .expect("string write");
        }
        writeln!(s, "miou={:.6}\nm_f1={:.6}\nm_acc={:.6}\npixels={}", self.miou, self.m_f1, self.m_acc, self.pixels).expect("string write");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn hand_enumerated_two_class_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate_labels(&[0, 0, 0, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(cm.counts(), &[2, 1, 0, 1]);
    }

    #[test]
    fn symmetric_errors() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        // TP 2, FP 1, FN 1 per class.
        let o = MeanOver::NonzeroUnion;
        assert!(close(cm.miou(o).unwrap(), 2.0 / 4.0));
        assert!(close(cm.m_f1(o).unwrap(), 4.0 / 6.0));
        assert!(close(cm.m_acc(o).unwrap(), 2.0 / 3.0));
        let d = ConfusionMatrix::from_counts(2, vec![2, 0, 0, 2]).unwrap();
        assert_eq!((d.miou(o).unwrap(), d.m_f1(o).unwrap(), d.m_acc(o).unwrap()), (1.0, 1.0, 1.0));
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let t = SegmentationMap::new(2, 2, 3, vec![0, 2, 2, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&t, &t).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 0, 1, 0, 0, 0, 2]);
        assert_eq!(cm.miou(MeanOver::NonzeroUnion).unwrap(), 1.0);
    }

    #[test]
    fn absent_classes_and_flag() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate_labels(&[0, 1, 1], &[0, 1, 0]).unwrap();
        // IoU: class 0 = 1/2, class 1 = 1/2; classes 2, 3 absent.
        assert!(close(cm.miou(MeanOver::NonzeroUnion).unwrap(), 0.5));
        assert!(close(cm.miou(MeanOver::AllClasses).unwrap(), 0.25));
        assert_eq!(cm.iou()[3], None);
        assert!(cm.report(MeanOver::NonzeroUnion).unwrap().to_lines().contains("iou.3=na\n"));
    }

    #[test]
    fn errors() {
        assert!(matches!(ConfusionMatrix::new(2).miou(MeanOver::NonzeroUnion), Err(Error::Data(_))));
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate_labels(&[0, 2], &[0, 1]).is_err());
        assert!(cm.accumulate_labels(&[0], &[0, 1]).is_err());
        let a = SegmentationMap::new(2, 2, 2, vec![0; 4]).unwrap();
        let b = SegmentationMap::new(1, 1, 2, vec![0]).unwrap();
        assert!(matches!(cm.accumulate(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn report_lines() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 2]).unwrap();
        let r = cm.report(MeanOver::NonzeroUnion).unwrap();
        assert_eq!(r.to_lines(), "iou.0=0.500000\niou.1=0.500000\nmiou=0.500000\nm_f1=0.666667\nm_acc=0.666667\npixels=6\n");
    }

    fn labels(k: u16, n: usize) -> impl Strategy<Value = (Vec<u16>, Vec<u16>)> {
        (proptest::collection::vec(0..k, n), proptest::collection::vec(0..k, n))
    }

    proptest! {
        #[test]
        fn streaming_equals_single_shot((t, p) in labels(5, 60), cut in 0usize..60) {
            let mut whole = ConfusionMatrix::new(5);
            whole.accumulate_labels(&t, &p).unwrap();
            let mut a = ConfusionMatrix::new(5);
            a.accumulate_labels(&t[..cut], &p[..cut]).unwrap();
            let mut b = ConfusionMatrix::new(5);
            b.accumulate_labels(&t[cut..], &p[cut..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(&a, &whole);
            prop_assert_eq!(whole.total(), 60);
        }

        #[test]
        fn iou_bounded_by_f1((t, p) in labels(4, 40)) {
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate_labels(&t, &p).unwrap();
            for (i, f) in cm.iou().into_iter().zip(cm.f1()) {
                if let (Some(i), Some(f)) = (i, f) {
                    prop_assert!(0.0 <= i && i <= f && f <= 1.0);
                    prop_assert!((f - 2.0 * i / (1.0 + i)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn relabeling_invariance((t, p) in labels(4, 40), perm in Just([0u16, 1, 2, 3]).prop_shuffle()) {
            let mut a = ConfusionMatrix::new(4);
            a.accumulate_labels(&t, &p).unwrap();
            let map = |v: &[u16]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
            let mut b = ConfusionMatrix::new(4);
            b.accumulate_labels(&map(&t), &map(&p)).unwrap();
            for over in [MeanOver::NonzeroUnion, MeanOver::AllClasses] {
                prop_assert!((a.miou(over).unwrap() - b.miou(over).unwrap()).abs() < 1e-12);
                prop_assert!((a.m_f1(over).unwrap() - b.m_f1(over).unwrap()).abs() < 1e-12);
                prop_assert!((a.m_acc(over).unwrap() - b.m_acc(over).unwrap()).abs() < 1e-12);
            }
        }
    }
}
