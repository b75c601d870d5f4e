//! Pixel routing and the per-classifier, total and flat objectives.

use hseg_tensor::{ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::hierarchy::{ClassifierId, FlatSpace, LabelHierarchy, NodeId};
use crate::synth::{bbox_to_pseudo_mask, Sample};

/// Floor applied to probabilities before taking logs.
pub const LOG_EPSILON: f64 = 1e-12;

/// Hierarchy nodes that supervise each pixel of a batch.
///
/// Pixels are numbered `n * H * W + y * W + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelTargets {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    /// Node from a per-pixel annotation.
    pub dense: Vec<Option<NodeId>>,
    /// Node from a box pseudo mask.
    pub boxed: Vec<Option<NodeId>>,
    /// Whether each image came with a dense label map.
    pub has_dense: Vec<bool>,
}

impl PixelTargets {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn pixels(&self) -> usize {
        self.images * self.area()
    }

    /// Resolve dataset labels through the hierarchy's bindings. Boxes are
    /// rasterized into pseudo masks first.
    pub fn from_samples(h: &LabelHierarchy, batch: &[(&str, &Sample)], ignore: u32) -> Result<Self> {
        let (height, width) = batch
            .first()
            .map(|(_, s)| (s.height(), s.width()))
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let mut t = Self {
            images: batch.len(),
            height,
            width,
            dense: Vec::with_capacity(batch.len() * height * width),
            boxed: Vec::with_capacity(batch.len() * height * width),
            has_dense: Vec::with_capacity(batch.len()),
        };
        for &(dataset, s) in batch {
            if (s.height(), s.width()) != (height, width) {
                return Err(DataError::Geometry("batch images differ in size".into()).into());
            }
            let lookup = |label: u32| -> Result<Option<NodeId>> {
                if label == ignore {
                    return Ok(None);
                }
                h.bound_node(dataset, label).map(Some).ok_or_else(|| {
                    Error::Config(format!("dataset `{dataset}` label {label} is not bound in the hierarchy"))
                })
            };
            match &s.dense {
                Some(m) => {
                    for &v in &m.data {
                        t.dense.push(lookup(v)?);
                    }
                }
                None => t.dense.extend(std::iter::repeat_n(None, height * width)),
            }
            t.has_dense.push(s.dense.is_some());
            match &s.boxes {
                Some(b) => {
                    let mask = bbox_to_pseudo_mask(b, height, width, ignore);
                    for &v in &mask.labels.data {
                        t.boxed.push(lookup(v)?);
                    }
                }
                None => t.boxed.extend(std::iter::repeat_n(None, height * width)),
            }
        }
        Ok(t)
    }
}

/// Supervised pixels of one classifier: `(pixel, target class)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassifierSupervision {
    /// Pixels with per-pixel ground truth.
    pub p1: Vec<(usize, usize)>,
    /// Pixels with pseudo ground truth that the parent currently routes here.
    pub p2: Vec<(usize, usize)>,
}

/// One entry per classifier, in classifier order.
pub type SupervisionSets = Vec<ClassifierSupervision>;

/// Decide which pixels supervise which classifier.
///
/// `decisions[j]` is the per-pixel argmax of classifier `j` from the current
/// forward pass; only the parents' decisions are read. A pixel with per-pixel
/// ground truth for `j` never also enters `j`'s pseudo set.
pub fn route_supervision(h: &LabelHierarchy, targets: &PixelTargets, decisions: &[Vec<u32>]) -> SupervisionSets {
    let n_cls = h.classifiers().len();
    let mut sets = vec![ClassifierSupervision::default(); n_cls];
    // cache of the path per node
    let mut paths: Vec<Option<crate::hierarchy::LabelPath>> = vec![None; h.node_count()];
    let mut path_of = |n: NodeId| -> crate::hierarchy::LabelPath {
        paths[n.0].get_or_insert_with(|| h.path_encode(n)).clone()
    };
    for p in 0..targets.pixels() {
        let dense_path = targets.dense[p].map(&mut path_of);
        if let Some(path) = &dense_path {
            for &(j, y) in path.steps() {
                sets[j.0].p1.push((p, y));
            }
        }
        if let Some(node) = targets.boxed[p] {
            let path = path_of(node);
            for &(j, y) in path.steps() {
                if dense_path.as_ref().is_some_and(|d| d.class_at(j).is_some()) {
                    continue;
                }
                let gate = match h.classifier(j).anchor {
                    None => true,
                    Some((parent, class)) => decisions[parent.0][p] as usize == class,
                };
                if gate {
                    sets[j.0].p2.push((p, y));
                }
            }
        }
    }
    sets
}

/// Flat element index of class `y` at pixel `p` in an `[N, C, H, W]` tensor.
fn element(p: usize, y: usize, classes: usize, area: usize) -> usize {
    (p / area) * classes * area + y * area + p % area
}

/// `-(1/|P1|) sum log s - (1/|P2|) sum log s` for one classifier; each
/// empty set contributes exactly zero.
pub fn hierarchical_loss(tape: &mut Tape, probs: Var, sup: &ClassifierSupervision) -> Result<Var> {
    let s = tape.value(probs).shape().to_vec();
    let (classes, area) = (s[1], s[2..].iter().product::<usize>());
    let mut entries = Vec::with_capacity(sup.p1.len() + sup.p2.len());
    for set in [&sup.p1, &sup.p2] {
        if set.is_empty() {
            continue;
        }
        let w = 1.0 / set.len() as f64;
        entries.extend(set.iter().map(|&(p, y)| (element(p, y, classes, area), w)));
    }
    Ok(tape.neg_log_gather(probs, entries, LOG_EPSILON)?)
}

/// Loss weights per hierarchy level plus the L2 decay coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// `lambdas[l-1]` weights classifiers at level `l`; deeper levels reuse the last entry.
    pub lambdas: Vec<f64>,
    pub decay: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambdas: vec![1.0, 0.1, 0.1],
            decay: 0.00017,
        }
    }
}

impl LossWeights {
    pub fn lambda(&self, level: usize) -> f64 {
        let i = level.saturating_sub(1).min(self.lambdas.len().saturating_sub(1));
        self.lambdas.get(i).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("lambdas must be non-empty and non-negative".into()));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config("decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// `sum_j lambda_level(j) * L_j + decay * sum ||w||^2`.
///
/// The regularizer enters as a constant: its gradient is applied by the
/// optimizer's weight-decay term, so it is reported here but not differentiated.
pub fn total_loss(
    tape: &mut Tape,
    h: &LabelHierarchy,
    losses: &[(ClassifierId, Var)],
    weights: &LossWeights,
    params: &ParamStore,
) -> Result<Var> {
    let reg = weights.decay * params.decayed_sum_of_squares();
    let mut total = tape.constant(Tensor::scalar(reg));
    for &(j, l) in losses {
        let scaled = tape.scale(l, weights.lambda(h.classifier(j).level));
        total = tape.add(total, scaled)?;
    }
    Ok(total)
}

/// Per-pixel flat class, or `None` to ignore.
///
/// Box pixels take the box's class, then dense labels apply. When
/// `flat.unlabeled` is set, the remaining pixels of images without a dense
/// map become the extra class.
pub fn flat_targets(flat: &FlatSpace, targets: &PixelTargets) -> Result<Vec<Option<usize>>> {
    let index = |n: NodeId| {
        flat.index_of(n)
            .ok_or_else(|| Error::Config(format!("node {} is not part of the flat label space", n.0)))
    };
    let area = targets.area();
    (0..targets.pixels())
        .map(|p| {
            if let Some(n) = targets.boxed[p] {
                return index(n).map(Some);
            }
            if let Some(n) = targets.dense[p] {
                return index(n).map(Some);
            }
            Ok(if targets.has_dense[p / area] { None } else { flat.unlabeled })
        })
        .collect()
}

/// Mean cross entropy over every non-ignored pixel.
pub fn flat_loss(tape: &mut Tape, probs: Var, targets: &[Option<usize>]) -> Result<Var> {
    let s = tape.value(probs).shape().to_vec();
    let (classes, area) = (s[1], s[2..].iter().product::<usize>());
    let count = targets.iter().flatten().count();
    let w = if count == 0 { 0.0 } else { 1.0 / count as f64 };
    let entries = targets
        .iter()
        .enumerate()
        .filter_map(|(p, t)| t.map(|y| (element(p, y, classes, area), w)))
        .collect();
    Ok(tape.neg_log_gather(probs, entries, LOG_EPSILON)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::parse_hierarchy;

    #[test]
    fn uniform_probabilities_give_log_k() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 4, 1, 1], 0.25));
        let sup = ClassifierSupervision {
            p1: vec![(0, 2)],
            p2: vec![],
        };
        let l = hierarchical_loss(&mut tape, p, &sup).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lambda_lookup_and_total() {
        let h = parse_hierarchy("root\n  a\n    a1\n      x\n      y\n    a2\n  b\n").unwrap();
        let w = LossWeights::default();
        assert_eq!(w.lambda(1), 1.0);
        assert_eq!(w.lambda(3), 0.1);
        assert_eq!(w.lambda(7), 0.1);
        let mut tape = Tape::new();
        let ls: Vec<(ClassifierId, Var)> = [2.0, 1.0, 1.0]
            .iter()
            .enumerate()
            .map(|(j, &v)| (ClassifierId(j), tape.constant(Tensor::scalar(v))))
            .collect();
        let t = total_loss(&mut tape, &h, &ls, &LossWeights { decay: 0.0, ..w }, &ParamStore::new()).unwrap();
        assert!((tape.value(t).item() - 2.2).abs() < 1e-12);
    }
}
