//! Per-classifier and per-level scoring of hierarchical and flat networks.

use std::collections::BTreeMap;

use hseg_tensor::Tensor;

use super::loss::PixelTargets;
use crate::error::{Error, Result};
use crate::hierarchy::{FlatSpace, LabelHierarchy, LabelPath, NodeId};
use crate::inference::argmax_channels;
use crate::metrics::{filter_evaluated_classes, flat_protocol_score, mpa_miou, ClassFilter, ConfusionAccumulator, Scores};
use crate::network::Network;
use crate::synth::{derive_seed, downscale_and_crop, CorpusSplit, Sample};

/// Images, targets and dataset of one evaluation chunk.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    pub images: Tensor,
    pub targets: PixelTargets,
}

/// Crop every sample to `crop` with fixed offsets and group into batches.
pub fn prepare_eval(h: &LabelHierarchy, splits: &[CorpusSplit], crop: [usize; 2], batch: usize) -> Result<Vec<EvalBatch>> {
    let mut out = Vec::new();
    for (d, split) in splits.iter().enumerate() {
        let crops: Vec<Sample> = split
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| downscale_and_crop(s, crop[0], crop[1], derive_seed(0, &[d as u64, i as u64])))
            .collect::<std::result::Result<_, _>>()?;
        for chunk in crops.chunks(batch.max(1)) {
            let images = Tensor::stack(&chunk.iter().map(|s| s.image.to_tensor()).collect::<Vec<_>>())?;
            let pairs: Vec<(&str, &Sample)> = chunk.iter().map(|s| (split.spec.name.as_str(), s)).collect();
            let targets = PixelTargets::from_samples(h, &pairs, split.spec.ignore_id)?;
            out.push(EvalBatch { images, targets });
        }
    }
    Ok(out)
}

/// Ground-truth pixel count per classifier class, from dense labels and,
/// where no dense label reaches a classifier, box pseudo labels.
pub fn class_counts(h: &LabelHierarchy, batches: &[PixelTargets]) -> Vec<Vec<u64>> {
    let mut counts: Vec<Vec<u64>> = h.classifiers().iter().map(|c| vec![0; c.classes.len()]).collect();
    let mut cache: BTreeMap<NodeId, LabelPath> = BTreeMap::new();
    for t in batches {
        for p in 0..t.pixels() {
            let dense = t.dense[p].map(|n| cache.entry(n).or_insert_with(|| h.path_encode(n)).clone());
            if let Some(path) = &dense {
                for &(j, y) in path.steps() {
                    counts[j.0][y] += 1;
                }
            }
            if let Some(n) = t.boxed[p] {
                let path = cache.entry(n).or_insert_with(|| h.path_encode(n)).clone();
                for &(j, y) in path.steps() {
                    if dense.as_ref().is_none_or(|d| d.class_at(j).is_none()) {
                        counts[j.0][y] += 1;
                    }
                }
            }
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelScore {
    pub level: usize,
    pub mpa: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Scores per classifier scope; `None` when the filter left no class.
    pub classifiers: Vec<Option<Scores>>,
    pub levels: Vec<LevelScore>,
}

impl EvalReport {
    /// Mean of the finite level mPAs, used for early stopping.
    pub fn summary_mpa(&self) -> f64 {
        let v: Vec<f64> = self.levels.iter().map(|l| l.mpa).filter(|m| m.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    pub fn level(&self, level: usize) -> Option<&LevelScore> {
        self.levels.iter().find(|l| l.level == level)
    }

    /// Element-wise mean of several reports' level scores.
    pub fn average_levels(reports: &[EvalReport]) -> Vec<LevelScore> {
        let Some(first) = reports.first() else { return Vec::new() };
        first
            .levels
            .iter()
            .map(|l| {
                let same: Vec<&LevelScore> = reports.iter().filter_map(|r| r.level(l.level)).collect();
                let n = same.len() as f64;
                LevelScore {
                    level: l.level,
                    mpa: same.iter().map(|s| s.mpa).sum::<f64>() / n,
                    miou: same.iter().map(|s| s.miou).sum::<f64>() / n,
                }
            })
            .collect()
    }
}

/// Pairs of (superclass, subclasses) inside a flat space where a coarse
/// node and its descendants are both classes.
fn conflicts(h: &LabelHierarchy, flat: &FlatSpace) -> Vec<(usize, Vec<usize>)> {
    flat.classes
        .iter()
        .enumerate()
        .filter_map(|(i, &n)| {
            let subs: Vec<usize> = flat
                .classes
                .iter()
                .enumerate()
                .filter(|&(k, &m)| k != i && h.is_ancestor_or_self(n, m))
                .map(|(k, _)| k)
                .collect();
            (!subs.is_empty()).then_some((i, subs))
        })
        .collect()
}

/// Flat predictions with the second-choice rule applied where a coarse
/// class competes with its own subclasses.
fn flat_predictions(h: &LabelHierarchy, flat: &FlatSpace, probs: &Tensor, targets: &PixelTargets) -> Result<Vec<u32>> {
    let mut pred = argmax_channels(probs);
    let pairs = conflicts(h, flat);
    if pairs.is_empty() {
        return Ok(pred);
    }
    let area = targets.area();
    let classes = flat.len();
    let gt_flat: Vec<u32> = targets
        .dense
        .iter()
        .map(|n| n.and_then(|n| flat.index_of(n)).map_or(u32::MAX, |i| i as u32))
        .collect();
    for i in 0..targets.images {
        let plane = &probs.data()[i * classes * area..(i + 1) * classes * area];
        let gt = &gt_flat[i * area..(i + 1) * area];
        for (sup, subs) in &pairs {
            let fixed = flat_protocol_score(gt, plane, classes, *sup, subs).map_err(Error::from)?;
            for p in 0..area {
                if subs.contains(&(gt[p] as usize)) {
                    pred[i * area + p] = fixed[p];
                }
            }
        }
    }
    Ok(pred)
}

/// Score `net` on prepared batches.
///
/// Every classifier is scored on the pixels whose ground-truth path passes
/// through it. A flat network is scored in the same scopes, with an extra
/// "other" column for predictions outside the scope.
pub fn evaluate(
    net: &mut Network,
    h: &LabelHierarchy,
    flat: Option<&FlatSpace>,
    batches: &[EvalBatch],
    train_counts: &[Vec<u64>],
    filter: ClassFilter,
) -> Result<EvalReport> {
    let scopes = h.classifiers();
    let extra = usize::from(flat.is_some());
    let mut accs: Vec<ConfusionAccumulator> =
        scopes.iter().map(|c| ConfusionAccumulator::new(c.classes.len() + extra)).collect();
    let mut cache: BTreeMap<NodeId, LabelPath> = BTreeMap::new();
    for b in batches {
        let probs = net.predict(&b.images)?;
        let preds: Vec<Vec<u32>> = match flat {
            None => probs.iter().map(argmax_channels).collect(),
            Some(f) => vec![flat_predictions(h, f, &probs[0], &b.targets)?],
        };
        for p in 0..b.targets.pixels() {
            let Some(g) = b.targets.dense[p] else { continue };
            let path = cache.entry(g).or_insert_with(|| h.path_encode(g)).clone();
            for &(j, y) in path.steps() {
                let pred = match flat {
                    None => preds[j.0][p] as usize,
                    Some(f) => {
                        let k = preds[0][p] as usize;
                        f.classes
                            .get(k)
                            .and_then(|&n| cache.entry(n).or_insert_with(|| h.path_encode(n)).class_at(j))
                            .unwrap_or(scopes[j.0].classes.len())
                    }
                };
                accs[j.0].add(y, pred)?;
            }
        }
    }
    let val_counts: Vec<Vec<u64>> = accs
        .iter()
        .zip(scopes)
        .map(|(a, c)| (0..c.classes.len()).map(|y| (0..a.size()).map(|k| a.get(y, k)).sum()).collect())
        .collect();
    let mut classifiers = Vec::with_capacity(scopes.len());
    let mut by_level: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for (j, c) in scopes.iter().enumerate() {
        let keep = filter_evaluated_classes(&train_counts[j], &[&val_counts[j]], filter);
        if keep.is_empty() {
            classifiers.push(None);
            continue;
        }
        let s = mpa_miou(&accs[j], Some(&keep))?;
        by_level
            .entry(c.level)
            .or_default()
            .extend(s.per_class.iter().map(|k| (k.pa, k.iou)));
        classifiers.push(Some(s));
    }
    let levels = by_level
        .into_iter()
        .map(|(level, v)| {
            let n = v.len() as f64;
            LevelScore {
                level,
                mpa: v.iter().map(|x| x.0).sum::<f64>() / n,
                miou: v.iter().map(|x| x.1).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(EvalReport { classifiers, levels })
}
