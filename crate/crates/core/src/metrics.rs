//! Confusion matrices, mean pixel accuracy and mean IoU.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

/// Square `gt x pred` count matrix for one evaluation scope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: usize, pred: usize) -> Result<(), MetricsError> {
        for label in [gt, pred] {
            if label >= self.size {
                return Err(MetricsError::LabelOutOfRange {
                    label,
                    size: self.size,
                });
            }
        }
        self.counts[gt * self.size + pred] += 1;
        Ok(())
    }

    /// Count every `(gt, pred)` pair, skipping pixels whose gt is `ignore`.
    /// On error the accumulator is left unchanged.
    pub fn accumulate(&mut self, gt: &[u32], pred: &[u32], ignore: Option<u32>) -> Result<(), MetricsError> {
        if gt.len() != pred.len() {
            return Err(MetricsError::SizeMismatch(gt.len(), pred.len()));
        }
        let mut staged = self.clone();
        for (&g, &p) in gt.iter().zip(pred) {
            if Some(g) == ignore {
                continue;
            }
            staged.add(g as usize, p as usize)?;
        }
        *self = staged;
        Ok(())
    }

    /// Element-wise sum with another accumulator of the same size.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<(), MetricsError> {
        if other.size != self.size {
            return Err(MetricsError::SizeMismatch(self.size, other.size));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.size..(c + 1) * self.size].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.size).map(|k| self.get(k, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScore {
    pub class: usize,
    pub gt_pixels: u64,
    pub pa: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    /// NaN when no filtered class has ground-truth pixels.
    pub mpa: f64,
    pub miou: f64,
    /// Scored classes only (those with at least one gt pixel).
    pub per_class: Vec<ClassScore>,
}

impl Scores {
    /// `class, PA, IoU` lines followed by the means.
    pub fn to_lines(&self, name: impl Fn(usize) -> String) -> String {
        let mut out = String::new();
        for c in &self.per_class {
            let _ = writeln!(out, "{}, {:.6}, {:.6}", name(c.class), c.pa, c.iou);
        }
        let _ = writeln!(out, "mean, {:.6}, {:.6}", self.mpa, self.miou);
        out
    }

    /// Aligned human-readable table.
    pub fn to_table(&self, name: impl Fn(usize) -> String) -> String {
        let names: Vec<String> = self.per_class.iter().map(|c| name(c.class)).collect();
        let width = names.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>7}  {:>7}\n", "class", "gt pixels", "PA", "IoU");
        for (c, n) in self.per_class.iter().zip(&names) {
            let _ = writeln!(out, "{n:<width$}  {:>9}  {:>7.4}  {:>7.4}", c.gt_pixels, c.pa, c.iou);
        }
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7.4}  {:>7.4}", "mean", "", self.mpa, self.miou);
        out
    }
}

/// Per-class pixel accuracy and IoU, averaged over `filter` (all classes if
/// `None`). Classes without ground-truth pixels are left out of the means.
pub fn mpa_miou(acc: &ConfusionAccumulator, filter: Option<&[usize]>) -> Result<Scores, MetricsError> {
    let all: Vec<usize> = (0..acc.size()).collect();
    let classes = filter.unwrap_or(&all);
    if classes.is_empty() {
        return Err(MetricsError::EmptyFilter);
    }
    let mut per_class = Vec::new();
    for &c in classes {
        if c >= acc.size() {
            return Err(MetricsError::LabelOutOfRange {
                label: c,
                size: acc.size(),
            });
        }
        let row = acc.row_sum(c);
        if row == 0 {
            continue;
        }
        let tp = acc.get(c, c) as f64;
        let union = (row + acc.col_sum(c)) as f64 - tp;
        per_class.push(ClassScore {
            class: c,
            gt_pixels: row,
            pa: tp / row as f64,
            iou: tp / union,
        });
    }
    let n = per_class.len() as f64;
    let (mpa, miou) = if per_class.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            per_class.iter().map(|c| c.pa).sum::<f64>() / n,
            per_class.iter().map(|c| c.iou).sum::<f64>() / n,
        )
    };
    Ok(Scores { mpa, miou, per_class })
}

/// Two highest-probability classes at one pixel; ties go to the lower index.
fn top_two(probs: &[f64], classes: usize, area: usize, p: usize) -> (usize, usize) {
    let (mut best, mut second) = (0usize, usize::MAX);
    for k in 1..classes {
        let v = probs[k * area + p];
        if v > probs[best * area + p] {
            second = best;
            best = k;
        } else if second == usize::MAX || v > probs[second * area + p] {
            second = k;
        }
    }
    (best, second)
}

/// Prediction map for the flat baseline under the second-choice rule.
///
/// For pixels whose gt is one of `subclasses`, a top choice of `superclass`
/// is replaced by the runner-up when that is a subclass. Every other pixel
/// keeps its argmax. `probs` is one image laid out `[classes, area]`.
pub fn flat_protocol_score(
    gt: &[u32],
    probs: &[f64],
    classes: usize,
    superclass: usize,
    subclasses: &[usize],
) -> Result<Vec<u32>, MetricsError> {
    if classes < 2 || !probs.len().is_multiple_of(classes) {
        return Err(MetricsError::SizeMismatch(probs.len(), classes));
    }
    let area = probs.len() / classes;
    if gt.len() != area {
        return Err(MetricsError::SizeMismatch(gt.len(), area));
    }
    for &c in subclasses.iter().chain([&superclass]) {
        if c >= classes {
            return Err(MetricsError::UnknownClass(c));
        }
    }
    Ok((0..area)
        .map(|p| {
            let (best, second) = top_two(probs, classes, area, p);
            let is_sub_gt = subclasses.contains(&(gt[p] as usize));
            if is_sub_gt && best == superclass && subclasses.contains(&second) {
                second as u32
            } else {
                best as u32
            }
        })
        .collect())
}

/// Which side of the threshold a class must fall on to be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdDirection {
    /// Keep classes with strictly more pixels than the threshold.
    Above,
    /// Keep classes with strictly fewer pixels than the threshold (still at least one).
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFilter {
    pub threshold: u64,
    pub direction: ThresholdDirection,
}

impl Default for ClassFilter {
    fn default() -> Self {
        Self {
            threshold: 0,
            direction: ThresholdDirection::Above,
        }
    }
}

impl ClassFilter {
    fn keeps(&self, count: u64) -> bool {
        match self.direction {
            ThresholdDirection::Above => count > self.threshold,
            ThresholdDirection::Below => count > 0 && count < self.threshold,
        }
    }
}

/// Classes that satisfy `filter` on the training counts and on every
/// validation split's counts.
pub fn filter_evaluated_classes(train: &[u64], validation: &[&[u64]], filter: ClassFilter) -> Vec<usize> {
    (0..train.len())
        .filter(|&c| {
            filter.keeps(train[c])
                && validation
                    .iter()
                    .all(|v| v.get(c).is_some_and(|&n| filter.keeps(n)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hand_matrix() {
        let mut acc = ConfusionAccumulator::new(2);
        acc.accumulate(&[0, 0, 0, 0, 1, 1, 1, 1], &[0, 0, 0, 1, 0, 1, 1, 1], None)
            .unwrap();
        let s = mpa_miou(&acc, None).unwrap();
        assert_abs_diff_eq!(s.mpa, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(s.miou, 0.6, epsilon = 1e-15);
    }

    #[test]
    fn ignore_and_range() {
        let mut acc = ConfusionAccumulator::new(3);
        acc.accumulate(&[255, 255], &[0, 1], Some(255)).unwrap();
        assert_eq!(acc.total(), 0);
        assert!(acc.accumulate(&[0, 3], &[0, 0], None).is_err());
        assert_eq!(acc.total(), 0, "failed accumulate must not leave partial counts");
        assert!(acc.accumulate(&[0], &[0, 1], None).is_err());
    }

    #[test]
    fn absent_classes_leave_the_mean() {
        let mut acc = ConfusionAccumulator::new(3);
        acc.accumulate(&[0, 0, 2], &[0, 1, 2], None).unwrap();
        let s = mpa_miou(&acc, None).unwrap();
        assert_eq!(s.per_class.len(), 2);
        assert_abs_diff_eq!(s.mpa, 0.75, epsilon = 1e-15);
        assert!(mpa_miou(&acc, Some(&[])).is_err());
    }

    #[test]
    fn second_choice_rule() {
        // classes: 0 background, 1 sign (super), 2 and 3 subclasses
        let probs = |v: [f64; 4]| v.to_vec();
        let sub = [2, 3];
        // argmax correct subclass
        assert_eq!(flat_protocol_score(&[2], &probs([0.1, 0.2, 0.6, 0.1]), 4, 1, &sub).unwrap(), vec![2]);
        // superclass first, correct subclass second
        assert_eq!(flat_protocol_score(&[2], &probs([0.1, 0.5, 0.3, 0.1]), 4, 1, &sub).unwrap(), vec![2]);
        // superclass first, wrong subclass second
        assert_eq!(flat_protocol_score(&[2], &probs([0.1, 0.5, 0.1, 0.3]), 4, 1, &sub).unwrap(), vec![3]);
        // gt not a subclass: untouched
        assert_eq!(flat_protocol_score(&[0], &probs([0.1, 0.5, 0.3, 0.1]), 4, 1, &sub).unwrap(), vec![1]);
        assert!(flat_protocol_score(&[0], &probs([0.1, 0.5, 0.3, 0.1]), 4, 7, &sub).is_err());
    }

    #[test]
    fn threshold_filter() {
        // 43 classes; 15 of them stay under 1000 pixels in training
        let train: Vec<u64> = (0..43).map(|c| if c < 15 { 400 } else { 5000 }).collect();
        let val: Vec<u64> = vec![2000; 43];
        let keep = filter_evaluated_classes(
            &train,
            &[&val],
            ClassFilter {
                threshold: 1000,
                direction: ThresholdDirection::Above,
            },
        );
        assert_eq!(keep.len(), 28);
        let under = filter_evaluated_classes(
            &train,
            &[&val],
            ClassFilter {
                threshold: 1000,
                direction: ThresholdDirection::Below,
            },
        );
        assert!(under.is_empty(), "validation counts are all above the threshold");
        let zero = filter_evaluated_classes(&[0, 1, 5], &[&[3, 3, 0]], ClassFilter::default());
        assert_eq!(zero, vec![1]);
    }
}
