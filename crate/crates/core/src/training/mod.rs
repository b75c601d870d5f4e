//! Training loop for hierarchical and flat networks.

mod eval;
mod loss;

use std::fmt::Write as _;

use hseg_tensor::{Sgd, SgdConfig, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use eval::{class_counts, evaluate, prepare_eval, EvalBatch, EvalReport, LevelScore};
pub use loss::{
    flat_loss, flat_targets, hierarchical_loss, route_supervision, total_loss, ClassifierSupervision, LossWeights,
    PixelTargets, SupervisionSets, LOG_EPSILON,
};

use crate::error::{Error, Result};
use crate::hierarchy::{ClassifierId, FlatSpace, LabelHierarchy, Rule};
use crate::inference::argmax_channels;
use crate::metrics::ClassFilter;
use crate::network::{Network, NetworkConfig, Pass};
use crate::synth::{derive_seed, downscale_and_crop, Annotation, BatchSampler, CorpusSplit, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One head per classifier, hierarchical loss.
    Hier,
    /// One head over the union of all bound labels.
    Flat,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hier" => Ok(Mode::Hier),
            "flat" => Ok(Mode::Flat),
            o => Err(format!("unknown mode `{o}` (expected hier or flat)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    /// Training crop `[height, width]`; must be divisible by the output stride.
    pub crop: [usize; 2],
    /// Samples per dataset in each batch; empty means one each.
    pub ratios: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Number of evenly spaced learning-rate halvings.
    pub lr_halvings: usize,
    pub weights: LossWeights,
    pub eval_every: usize,
    /// Stop after this many evaluations without a better validation mPA.
    pub patience: usize,
    /// Steps without pseudo-label terms; `None` means one epoch of the
    /// largest per-pixel annotated dataset.
    pub warmup_steps: Option<usize>,
    /// Extra "unlabeled" flat class; `None` enables it when a box-only dataset takes part.
    pub flat_unlabeled: Option<bool>,
    /// Decay of an exponential moving average of the weights used for
    /// evaluation; off unless set.
    pub weight_ema: Option<f64>,
    pub class_filter: ClassFilter,
    pub log_every: usize,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Hier,
            seed: 0,
            steps: 400,
            crop: [48, 48],
            ratios: Vec::new(),
            learning_rate: 0.01,
            momentum: 0.9,
            lr_halvings: 3,
            weights: LossWeights::default(),
            eval_every: 100,
            patience: 3,
            warmup_steps: None,
            flat_unlabeled: None,
            weight_ema: None,
            class_filter: ClassFilter::default(),
            log_every: 10,
            network: NetworkConfig {
                output_stride: 4,
                ..NetworkConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.weights.validate()?;
        let s = self.network.output_stride;
        if self.crop.iter().any(|&c| c == 0 || c % s != 0) {
            return Err(Error::Config(format!("crop {:?} must be a positive multiple of {s}", self.crop)));
        }
        if self.steps == 0 || self.eval_every == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, eval_every and log_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("need learning_rate > 0 and momentum in [0, 1)".into()));
        }
        if let Some(d) = self.weight_ema {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config("weight_ema must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at `step`: halved at each of `lr_halvings` evenly spaced milestones.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let k = self.lr_halvings + 1;
        let passed = (1..k).filter(|&i| step >= self.steps * i / k).count();
        self.learning_rate / f64::from(1u32 << passed)
    }
}

/// Line-oriented `step, split, metric, value` records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MetricsLog {
    lines: Vec<String>,
}

impl MetricsLog {
    pub fn record(&mut self, step: usize, split: &str, metric: &str, value: f64) {
        self.lines.push(format!("{step}, {split}, {metric}, {value:.6}"));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            let _ = writeln!(out, "{l}");
        }
        out
    }

    /// Values of `metric` on `split`, in order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<(usize, f64)> {
        self.lines
            .iter()
            .filter_map(|l| {
                let f: Vec<&str> = l.split(", ").collect();
                (f.len() == 4 && f[1] == split && f[2] == metric)
                    .then(|| Some((f[0].parse().ok()?, f[3].parse().ok()?)))
                    .flatten()
            })
            .collect()
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub optimizer: Sgd,
    pub log: MetricsLog,
    /// Level scores averaged over the last two evaluations.
    pub final_levels: Vec<LevelScore>,
    pub evaluations: Vec<EvalReport>,
    pub steps_run: usize,
    pub hierarchy: LabelHierarchy,
    pub flat: Option<FlatSpace>,
}

impl TrainOutcome {
    pub fn final_level(&self, level: usize) -> Option<&LevelScore> {
        self.final_levels.iter().find(|l| l.level == level)
    }
}

/// Bind every dataset into `h` and check the result can be trained.
pub fn prepare_hierarchy(h: &LabelHierarchy, train: &[CorpusSplit]) -> Result<LabelHierarchy> {
    let mut h = h.clone();
    for s in train {
        s.spec.bind(&mut h)?;
    }
    let annotations: Vec<_> = train.iter().map(|s| s.spec.annotations()).collect();
    let mut report = h.validate(&annotations);
    // bindings of datasets outside this run are harmless
    report.issues.retain(|i| i.rule != Rule::UnknownDataset);
    report.into_result()?;
    Ok(h)
}

fn default_warmup(train: &[CorpusSplit], sampler: &BatchSampler) -> usize {
    train
        .iter()
        .enumerate()
        .filter(|(_, s)| s.spec.annotation != Annotation::Bbox)
        .max_by_key(|(_, s)| s.samples.iter().map(|x| x.height() * x.width()).sum::<usize>())
        .map_or(0, |(d, _)| sampler.steps_per_epoch(d))
}

fn assemble(train: &[CorpusSplit], sampler: &BatchSampler, step: usize, crop: [usize; 2], seed: u64) -> Result<Vec<(usize, Sample)>> {
    sampler
        .batch(step)
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            let s = &train[r.dataset].samples[r.index];
            let c = downscale_and_crop(s, crop[0], crop[1], derive_seed(seed, &[3, step as u64, k as u64]))?;
            Ok((r.dataset, c))
        })
        .collect()
}

/// One optimization step; returns the loss value.
fn step_loss(
    net: &mut Network,
    h: &LabelHierarchy,
    flat: Option<&FlatSpace>,
    images: Tensor,
    targets: &PixelTargets,
    cfg: &TrainConfig,
    use_pseudo: bool,
) -> Result<(f64, Tape, Vec<(hseg_tensor::ParamId, Var)>)> {
    let mut tape = Tape::new();
    let mut pass = Pass::train(&mut tape, net);
    let x = pass.tape.constant(images);
    let (_, probs) = net.forward_all(&mut pass, x)?;
    let loss = match flat {
        Some(f) => {
            let t = flat_targets(f, targets)?;
            let l = flat_loss(pass.tape, probs[0], &t)?;
            let reg = cfg.weights.decay * net.params.decayed_sum_of_squares();
            let r = pass.tape.constant(Tensor::scalar(reg));
            pass.tape.add(l, r)?
        }
        None => {
            let decisions: Vec<Vec<u32>> = probs.iter().map(|&p| argmax_channels(pass.tape.value(p))).collect();
            let mut sets = route_supervision(h, targets, &decisions);
            if !use_pseudo {
                sets.iter_mut().for_each(|s| s.p2.clear());
            }
            let mut losses = Vec::with_capacity(sets.len());
            for (j, s) in sets.iter().enumerate() {
                losses.push((ClassifierId(j), hierarchical_loss(pass.tape, probs[j], s)?));
            }
            total_loss(pass.tape, h, &losses, &cfg.weights, &net.params)?
        }
    };
    let bindings = pass.bindings();
    let value = tape.value(loss).item();
    if value.is_finite() {
        tape.backward(loss)?;
    }
    Ok((value, tape, bindings))
}

/// Train a network on `train` and score it on `val` (dense-labeled splits).
pub fn train(h: &LabelHierarchy, train: &[CorpusSplit], val: &[CorpusSplit], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training datasets".into()));
    }
    let h = prepare_hierarchy(h, train)?;
    let ratios = if cfg.ratios.is_empty() { vec![1; train.len()] } else { cfg.ratios.clone() };
    let sizes: Vec<usize> = train.iter().map(|s| s.samples.len()).collect();
    let sampler = BatchSampler::new(&sizes, &ratios, derive_seed(cfg.seed, &[2]), true)?;
    let warmup = cfg.warmup_steps.unwrap_or_else(|| default_warmup(train, &sampler));

    let flat = match cfg.mode {
        Mode::Hier => None,
        Mode::Flat => {
            let any_boxes = train.iter().any(|s| s.spec.annotation == Annotation::Bbox);
            Some(h.flatten_union(cfg.flat_unlabeled.unwrap_or(any_boxes)))
        }
    };
    let mut net = match &flat {
        None => Network::build(&h, &cfg.network, derive_seed(cfg.seed, &[1]))?,
        Some(f) => Network::build_flat(f, &cfg.network, derive_seed(cfg.seed, &[1]))?,
    };
    let mut opt = Sgd::new(
        SgdConfig {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weights.decay,
        },
        &net.params,
    )?;

    // fixed evaluation inputs and class statistics
    let eval_batches = prepare_eval(&h, val, cfg.crop, 4)?;
    let train_targets: Vec<PixelTargets> = train
        .iter()
        .map(|s| {
            let pairs: Vec<(&str, &Sample)> = s.samples.iter().map(|x| (s.spec.name.as_str(), x)).collect();
            pairs
                .chunks(1)
                .map(|c| PixelTargets::from_samples(&h, c, s.spec.ignore_id))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let train_counts = class_counts(&h, &train_targets);

    let mut log = MetricsLog::default();
    let mut shadow: Option<Vec<Tensor>> = cfg
        .weight_ema
        .map(|_| net.params.iter().map(|p| p.value.clone()).collect());
    let mut evaluations: Vec<EvalReport> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut lr = f64::NAN;
    let mut steps_run = 0;

    for step in 0..cfg.steps {
        let step_lr = cfg.learning_rate_at(step);
        if step_lr != lr {
            lr = step_lr;
            opt.set_learning_rate(lr);
            log.record(step, "train", "lr", lr);
        }
        let batch = assemble(train, &sampler, step, cfg.crop, cfg.seed)?;
        let images = Tensor::stack(&batch.iter().map(|(_, s)| s.image.to_tensor()).collect::<Vec<_>>())?;
        let pairs: Vec<(&str, &Sample)> = batch.iter().map(|(d, s)| (train[*d].spec.name.as_str(), s)).collect();
        let ignore = train[batch[0].0].spec.ignore_id;
        let targets = PixelTargets::from_samples(&h, &pairs, ignore)?;

        let (value, mut tape, bindings) =
            step_loss(&mut net, &h, flat.as_ref(), images, &targets, cfg, step >= warmup)?;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        net.params.collect_grads(&mut tape, &bindings);
        drop(tape);
        opt.step(&mut net.params)?;
        if let (Some(d), Some(sh)) = (cfg.weight_ema, shadow.as_mut()) {
            for (s, p) in sh.iter_mut().zip(net.params.iter()) {
                for (a, b) in s.data_mut().iter_mut().zip(p.value.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
        steps_run = step + 1;
        if step % cfg.log_every == 0 || steps_run == cfg.steps {
            log.record(step, "train", "loss", value);
        }

        if steps_run % cfg.eval_every == 0 || steps_run == cfg.steps {
            let report = {
                let mut eval_net = net.clone();
                if let Some(sh) = &shadow {
                    for (p, s) in eval_net.params.iter_mut().zip(sh) {
                        p.value = s.clone();
                    }
                }
                evaluate(&mut eval_net, &h, flat.as_ref(), &eval_batches, &train_counts, cfg.class_filter)?
            };
            for l in &report.levels {
                log.record(steps_run, "val", &format!("L{}/mPA", l.level), l.mpa);
                log.record(steps_run, "val", &format!("L{}/mIoU", l.level), l.miou);
            }
            let score = report.summary_mpa();
            evaluations.push(report);
            if score > best {
                best = score;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    log::info!("early stop at step {steps_run}: no improvement in {stale} evaluations");
                    break;
                }
            }
        }
    }

    let tail = &evaluations[evaluations.len().saturating_sub(2)..];
    let final_levels = EvalReport::average_levels(tail);
    for l in &final_levels {
        log.record(steps_run, "final", &format!("L{}/mPA", l.level), l.mpa);
        log.record(steps_run, "final", &format!("L{}/mIoU", l.level), l.miou);
    }
    Ok(TrainOutcome {
        network: net,
        optimizer: opt,
        log,
        final_levels,
        evaluations,
        steps_run,
        hierarchy: h,
        flat,
    })
}
