//! Scripted comparisons: flat versus hierarchical heads, and box versus
//! dense supervision of the fine classifiers.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hierarchy::LabelHierarchy;
use crate::synth::{Annotation, CorpusSplit, DatasetSpec, Split};
use crate::training::{train, LevelScore, Mode, TrainConfig};

/// Final scores of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub steps_run: usize,
    pub levels: Vec<LevelScore>,
}

impl RunSummary {
    pub fn level(&self, level: usize) -> Option<&LevelScore> {
        self.levels.iter().find(|l| l.level == level)
    }
}

/// Mean over runs of one level's scores; `None` if any run lacks the level.
pub fn mean_level(runs: &[RunSummary], level: usize) -> Option<LevelScore> {
    let scores: Vec<&LevelScore> = runs.iter().map(|r| r.level(level)).collect::<Option<_>>()?;
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    Some(LevelScore {
        level,
        mpa: scores.iter().map(|s| s.mpa).sum::<f64>() / n,
        miou: scores.iter().map(|s| s.miou).sum::<f64>() / n,
    })
}

fn levels_of(runs: &[RunSummary]) -> Vec<usize> {
    let mut v: Vec<usize> = runs.iter().flat_map(|r| r.levels.iter().map(|l| l.level)).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn run(h: &LabelHierarchy, train_set: &[CorpusSplit], val: &[CorpusSplit], cfg: &TrainConfig, label: &str) -> Result<RunSummary> {
    log::info!("training {label} (seed {})", cfg.seed);
    let out = train(h, train_set, val, cfg)?;
    Ok(RunSummary {
        label: label.to_string(),
        seed: cfg.seed,
        steps_run: out.steps_run,
        levels: out.final_levels,
    })
}

fn table(groups: &[(&str, &[RunSummary])]) -> String {
    let mut out = format!("{:<10} {:>5} {:>8} {:>8} {:>5}\n", "run", "level", "mPA", "mIoU", "seeds");
    for (label, runs) in groups {
        for level in levels_of(runs) {
            if let Some(m) = mean_level(runs, level) {
                let _ = writeln!(
                    out,
                    "{label:<10} {:>5} {:>8.2} {:>8.2} {:>5}",
                    format!("L{level}"),
                    100.0 * m.mpa,
                    100.0 * m.miou,
                    runs.len()
                );
            }
        }
    }
    out
}

/// Flat and hierarchical runs on the same data, one per seed each.
#[derive(Debug, Clone, PartialEq)]
pub struct AbComparison {
    pub flat: Vec<RunSummary>,
    pub hier: Vec<RunSummary>,
}

impl AbComparison {
    /// Mean mPA of hierarchical minus flat runs at `level`, in [-1, 1].
    pub fn mpa_gain(&self, level: usize) -> Option<f64> {
        Some(mean_level(&self.hier, level)?.mpa - mean_level(&self.flat, level)?.mpa)
    }

    pub fn to_table(&self) -> String {
        table(&[("flat", &self.flat), ("hier", &self.hier)])
    }
}

pub fn ab_compare(
    h: &LabelHierarchy,
    train_set: &[CorpusSplit],
    val: &[CorpusSplit],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AbComparison> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut cmp = AbComparison {
        flat: Vec::new(),
        hier: Vec::new(),
    };
    for &seed in seeds {
        for mode in [Mode::Flat, Mode::Hier] {
            let c = TrainConfig { mode, seed, ..cfg.clone() };
            match mode {
                Mode::Flat => cmp.flat.push(run(h, train_set, val, &c, "flat")?),
                Mode::Hier => cmp.hier.push(run(h, train_set, val, &c, "hier")?),
            }
        }
    }
    Ok(cmp)
}

/// The same scenes trained once with dense fine labels and once with boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionComparison {
    /// Deepest level, where the two runs differ in supervision.
    pub level: usize,
    pub dense: Vec<RunSummary>,
    pub boxes: Vec<RunSummary>,
}

impl SupervisionComparison {
    /// Mean box-supervised mPA over mean dense-supervised mPA at `self.level`.
    pub fn mpa_ratio(&self) -> Option<f64> {
        let d = mean_level(&self.dense, self.level)?.mpa;
        let b = mean_level(&self.boxes, self.level)?.mpa;
        (d > 0.0).then(|| b / d)
    }

    pub fn to_table(&self) -> String {
        let mut t = table(&[("dense", &self.dense), ("boxes", &self.boxes)]);
        if let Some(r) = self.mpa_ratio() {
            let _ = writeln!(t, "L{} mPA ratio boxes/dense: {r:.3}", self.level);
        }
        t
    }
}

/// Train on `spec` as given (box-annotated fine labels) and on its dense
/// twin; both see pixel-identical scenes and are scored on dense validation data.
pub fn box_vs_dense(
    h: &LabelHierarchy,
    spec: &DatasetSpec,
    corpus_seed: u64,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<SupervisionComparison> {
    if spec.annotation == Annotation::Dense {
        return Err(Error::Config(format!("dataset `{}` has no box annotations to compare", spec.name)));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let dense_spec = spec.with_annotation(Annotation::Dense);
    let mut bound = h.clone();
    spec.bind(&mut bound)?;
    let boxed_train = CorpusSplit::generate(spec, &bound, corpus_seed, Split::Train)?;
    let dense_train = CorpusSplit::generate(&dense_spec, &bound, corpus_seed, Split::Train)?;
    let val = CorpusSplit::generate(&dense_spec, &bound, corpus_seed, Split::Val)?;
    let cfg = TrainConfig {
        mode: Mode::Hier,
        ..cfg.clone()
    };
    let mut cmp = SupervisionComparison {
        level: h.depth(),
        dense: Vec::new(),
        boxes: Vec::new(),
    };
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        cmp.dense.push(run(h, std::slice::from_ref(&dense_train), std::slice::from_ref(&val), &c, "dense")?);
        cmp.boxes.push(run(h, std::slice::from_ref(&boxed_train), std::slice::from_ref(&val), &c, "boxes")?);
    }
    Ok(cmp)
}
