//! Shared feature extractor plus one classifier head per hierarchy classifier.
//!
//! ```text
//! image -> [stride-2 conv, BN-ReLU] x log2(stride) -> dilated residual blocks
//!       -> 1x1 conv to rep_depth, BN-ReLU                      (shared, computed once)
//! rep   -> 3x3 dilated conv to bottleneck, BN-ReLU -> 1x1 back to rep_depth, BN
//!       -> + rep, ReLU -> 1x1 projection to |C| (+bias)
//!       -> 2x2 stride-2 transposed conv -> bilinear to input size -> softmax
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use hseg_tensor::{DecayPolicy, NormMode, Padding, ParamId, ParamStore, RunningStats, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{ClassifierId, FlatSpace, LabelHierarchy};

/// Adaptation subnetwork dimensions of one head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub bottleneck: usize,
    /// Dilation of the 3x3 stage; controls the field of view.
    pub dilation: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            bottleneck: 16,
            dilation: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Spatial reduction of the shared representation: 4 or 8.
    pub output_stride: usize,
    /// Channels of the first stride-2 stage; each further stage doubles it.
    pub stem_width: usize,
    /// Residual blocks after the stem, at full representation resolution.
    pub blocks: usize,
    /// Dilation used inside the residual blocks instead of more striding.
    pub block_dilation: usize,
    pub rep_depth: usize,
    pub head: HeadConfig,
    /// Per-head overrides keyed by the classifier's node name.
    pub head_overrides: BTreeMap<String, HeadConfig>,
    /// Decay of the running batch-norm statistics.
    pub bn_decay: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            output_stride: 8,
            stem_width: 16,
            blocks: 2,
            block_dilation: 2,
            rep_depth: 32,
            head: HeadConfig::default(),
            head_overrides: BTreeMap::new(),
            bn_decay: 0.9,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.output_stride, 4 | 8) {
            return Err(Error::Config(format!("output stride must be 4 or 8, got {}", self.output_stride)));
        }
        let widths = [self.stem_width, self.rep_depth, self.head.bottleneck];
        if widths.contains(&0) || self.block_dilation == 0 || self.head.dilation == 0 {
            return Err(Error::Config("widths and dilations must be positive".into()));
        }
        if !(self.bn_decay > 0.0 && self.bn_decay < 1.0) {
            return Err(Error::Config("bn_decay must lie in (0, 1)".into()));
        }
        if self.head_overrides.values().any(|h| h.bottleneck == 0 || h.dilation == 0) {
            return Err(Error::Config("head overrides need positive sizes".into()));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.output_stride.trailing_zeros() as usize
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    dilation: usize,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

#[derive(Debug, Clone)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: ConvNorm,
    b: ConvNorm,
}

#[derive(Debug, Clone)]
struct Extractor {
    stem: Vec<ConvNorm>,
    blocks: Vec<ResBlock>,
    out: ConvNorm,
}

/// One softmax classifier and its adaptation branch.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    /// `None` for the flat baseline head.
    pub classifier: Option<ClassifierId>,
    pub name: String,
    pub classes: usize,
    /// Parent classifier and class index routing pixels to this head.
    pub anchor: Option<(ClassifierId, usize)>,
    pub config: HeadConfig,
    spatial: ConvNorm,
    expand: ConvNorm,
    project: Conv,
    upsample: ParamId,
}

/// Parameters bound on one tape. Each parameter becomes a tape leaf the
/// first time it is used, so shared weights have a single node.
pub struct Pass<'t> {
    pub tape: &'t mut Tape,
    pub mode: NormMode,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'t> Pass<'t> {
    /// Training pass: gradients flow to every parameter, BN uses batch stats.
    pub fn train(tape: &'t mut Tape, net: &Network) -> Self {
        Self {
            tape,
            mode: NormMode::Train {
                ema_decay: net.cfg.bn_decay,
            },
            bound: vec![None; net.params.len()],
            track_grads: true,
        }
    }

    /// Evaluation pass: running BN stats, no gradient tracking.
    pub fn eval(tape: &'t mut Tape, net: &Network) -> Self {
        Self {
            tape,
            mode: NormMode::Eval,
            bound: vec![None; net.params.len()],
            track_grads: false,
        }
    }

    /// Evaluation-mode forward whose parameters still receive gradients.
    pub fn eval_with_grads(tape: &'t mut Tape, net: &Network) -> Self {
        Self {
            track_grads: true,
            ..Self::eval(tape, net)
        }
    }

    fn var(&mut self, params: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let value = params.get(id).value.clone();
        let v = if self.track_grads {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.index()] = Some(v);
        v
    }

    /// Parameter/tape-node pairs for [`ParamStore::collect_grads`].
    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetworkConfig,
    pub params: ParamStore,
    /// Running statistics of every batch-norm layer, with its name.
    pub stats: Vec<(String, RunningStats)>,
    extractor: Extractor,
    pub heads: Vec<ClassifierHead>,
    shared_evals: usize,
}

struct Builder<'a> {
    params: ParamStore,
    stats: Vec<(String, RunningStats)>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let a = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.gen_range(-a..a))
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, dilation: usize, bias: bool) -> Result<Conv> {
        let w = self.uniform(&[c_out, c_in, k, k], c_in * k * k);
        let weight = self.params.register(format!("{name}.weight"), w, DecayPolicy::Decay)?;
        let bias = if bias {
            Some(self.params.register(format!("{name}.bias"), Tensor::zeros(&[c_out]), DecayPolicy::NoDecay)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride,
            dilation,
        })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        let gamma = self.params.register(format!("{name}.gamma"), Tensor::ones(&[c]), DecayPolicy::NoDecay)?;
        let beta = self.params.register(format!("{name}.beta"), Tensor::zeros(&[c]), DecayPolicy::NoDecay)?;
        self.stats.push((name.to_string(), RunningStats::new(c)));
        Ok(Norm {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        })
    }

    fn conv_norm(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, dilation: usize) -> Result<ConvNorm> {
        Ok(ConvNorm {
            conv: self.conv(&format!("{name}.conv"), c_in, c_out, k, stride, dilation, false)?,
            norm: self.norm(&format!("{name}.bn"), c_out)?,
        })
    }

    fn extractor(&mut self, cfg: &NetworkConfig) -> Result<Extractor> {
        let mut stem = Vec::new();
        let mut c = 3;
        for s in 0..cfg.stages() {
            let out = cfg.stem_width << s;
            stem.push(self.conv_norm(&format!("extractor.stem{s}"), c, out, 3, 2, 1)?);
            c = out;
        }
        let mut blocks = Vec::new();
        for b in 0..cfg.blocks {
            blocks.push(ResBlock {
                a: self.conv_norm(&format!("extractor.block{b}.a"), c, c, 3, 1, cfg.block_dilation)?,
                b: self.conv_norm(&format!("extractor.block{b}.b"), c, c, 3, 1, cfg.block_dilation)?,
            });
        }
        let out = self.conv_norm("extractor.out", c, cfg.rep_depth, 1, 1, 1)?;
        Ok(Extractor { stem, blocks, out })
    }

    fn head(
        &mut self,
        name: &str,
        classes: usize,
        classifier: Option<ClassifierId>,
        anchor: Option<(ClassifierId, usize)>,
        config: HeadConfig,
        rep: usize,
    ) -> Result<ClassifierHead> {
        let p = format!("head.{name}");
        let spatial = self.conv_norm(&format!("{p}.spatial"), rep, config.bottleneck, 3, 1, config.dilation)?;
        let expand = self.conv_norm(&format!("{p}.expand"), config.bottleneck, rep, 1, 1, 1)?;
        let project = self.conv(&format!("{p}.project"), rep, classes, 1, 1, 1, true)?;
        // identity-per-channel start: the 2x2 kernel begins as nearest upsampling
        let up = Tensor::from_fn(&[classes, classes, 2, 2], |i| if (i / 4) % (classes + 1) == 0 { 1.0 } else { 0.0 });
        let upsample = self.params.register(format!("{p}.upsample"), up, DecayPolicy::Decay)?;
        Ok(ClassifierHead {
            classifier,
            name: name.to_string(),
            classes,
            anchor,
            config,
            spatial,
            expand,
            project,
            upsample,
        })
    }
}

impl Network {
    /// Extractor plus one head per classifier of `h`, in classifier order.
    pub fn build(h: &LabelHierarchy, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if h.classifiers().is_empty() {
            return Err(Error::Config("the hierarchy has no classifier".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            stats: Vec::new(),
            rng: &mut rng,
        };
        let extractor = b.extractor(cfg)?;
        let mut heads = Vec::new();
        for c in h.classifiers() {
            let name = h.name(c.node);
            let hc = cfg.head_overrides.get(name).copied().unwrap_or(cfg.head);
            heads.push(b.head(name, c.classes.len(), Some(c.id), c.anchor, hc, cfg.rep_depth)?);
        }
        Ok(Self::assemble(cfg, b, extractor, heads))
    }

    /// Extractor plus a single head over a flat label space.
    pub fn build_flat(flat: &FlatSpace, cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if flat.len() < 2 {
            return Err(Error::Config("a flat head needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            stats: Vec::new(),
            rng: &mut rng,
        };
        let extractor = b.extractor(cfg)?;
        let head = b.head("flat", flat.len(), None, None, cfg.head, cfg.rep_depth)?;
        Ok(Self::assemble(cfg, b, extractor, vec![head]))
    }

    fn assemble(cfg: &NetworkConfig, b: Builder<'_>, extractor: Extractor, heads: Vec<ClassifierHead>) -> Self {
        Self {
            cfg: cfg.clone(),
            params: b.params,
            stats: b.stats,
            extractor,
            heads,
            shared_evals: 0,
        }
    }

    pub fn is_flat(&self) -> bool {
        self.heads.len() == 1 && self.heads[0].classifier.is_none()
    }

    /// How many times the shared representation has been computed.
    pub fn shared_evaluations(&self) -> usize {
        self.shared_evals
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn parameter_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    fn conv(&self, pass: &mut Pass, c: &Conv, x: Var) -> Result<Var> {
        let w = pass.var(&self.params, c.weight);
        let mut y = pass.tape.conv2d(x, w, c.stride, c.dilation, Padding::Same)?;
        if let Some(b) = c.bias {
            let bv = pass.var(&self.params, b);
            y = pass.tape.add_channel_bias(y, bv)?;
        }
        Ok(y)
    }

    fn norm(&mut self, pass: &mut Pass, n: &Norm, x: Var, relu: bool) -> Result<Var> {
        let g = pass.var(&self.params, n.gamma);
        let b = pass.var(&self.params, n.beta);
        let stats = &mut self.stats[n.stats].1;
        let y = match pass.mode {
            NormMode::Train { ema_decay } => {
                let (y, moments) = pass.tape.batch_norm_train(x, g, b)?;
                stats.update(&moments, ema_decay)?;
                y
            }
            NormMode::Eval => pass.tape.batch_norm_eval(x, g, b, stats)?,
        };
        Ok(if relu { pass.tape.relu(y) } else { y })
    }

    fn conv_norm(&mut self, pass: &mut Pass, l: &ConvNorm, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv(pass, &l.conv, x)?;
        self.norm(pass, &l.norm, y, relu)
    }

    /// Shared representation `[N, rep_depth, H/stride, W/stride]`.
    pub fn forward_shared(&mut self, pass: &mut Pass, images: Var) -> Result<Var> {
        let (_, c, h, w) = pass.tape.value(images).dims4()?;
        let s = self.cfg.output_stride;
        if c != 3 {
            return Err(Error::Config(format!("expected 3 input channels, got {c}")));
        }
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by the output stride {s}; pad or crop to a multiple of {s}"
            )));
        }
        self.shared_evals += 1;
        let ex = self.extractor.clone();
        let mut x = images;
        for l in &ex.stem {
            x = self.conv_norm(pass, l, x, true)?;
        }
        for b in &ex.blocks {
            let y = self.conv_norm(pass, &b.a, x, true)?;
            let y = self.conv_norm(pass, &b.b, y, false)?;
            let sum = pass.tape.add(y, x)?;
            x = pass.tape.relu(sum);
        }
        self.conv_norm(pass, &ex.out, x, true)
    }

    /// Class scores of head `index` before softmax, at `out_h x out_w`.
    pub fn forward_logits(&mut self, pass: &mut Pass, index: usize, rep: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let head = self.heads[index].clone();
        let y = self.conv_norm(pass, &head.spatial, rep, true)?;
        let y = self.conv_norm(pass, &head.expand, y, false)?;
        let y = pass.tape.add(y, rep)?;
        let y = pass.tape.relu(y);
        let y = self.conv(pass, &head.project, y)?;
        let k = pass.var(&self.params, head.upsample);
        let y = pass.tape.conv2d_transpose(y, k, 2)?;
        Ok(pass.tape.bilinear_upsample(y, out_h, out_w)?)
    }

    /// Per-pixel class probabilities `[N, |C|, out_h, out_w]` of head `index`.
    pub fn forward_head(&mut self, pass: &mut Pass, index: usize, rep: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let logits = self.forward_logits(pass, index, rep, out_h, out_w)?;
        Ok(pass.tape.softmax(logits)?)
    }

    /// Shared pass followed by every head at input resolution.
    pub fn forward_all(&mut self, pass: &mut Pass, images: Var) -> Result<(Var, Vec<Var>)> {
        let (_, _, h, w) = pass.tape.value(images).dims4()?;
        let rep = self.forward_shared(pass, images)?;
        let mut out = Vec::with_capacity(self.heads.len());
        for j in 0..self.heads.len() {
            out.push(self.forward_head(pass, j, rep, h, w)?);
        }
        Ok((rep, out))
    }

    /// Evaluation-mode probabilities for a batch, one tensor per head.
    pub fn predict(&mut self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let mut pass = Pass::eval(&mut tape, self);
        let x = pass.tape.constant(images.clone());
        let (_, sig) = self.forward_all(&mut pass, x)?;
        Ok(sig.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// Human-readable topology report.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let cfg = &self.cfg;
        let _ = writeln!(
            out,
            "extractor: {} stride-2 stages from width {}, {} residual blocks (dilation {}), representation depth {} at 1/{}",
            cfg.stages(),
            cfg.stem_width,
            cfg.blocks,
            cfg.block_dilation,
            cfg.rep_depth,
            cfg.output_stride
        );
        let _ = writeln!(out, "  parameters: {}", self.parameter_count_with_prefix("extractor."));
        for h in &self.heads {
            let id = h.classifier.map_or_else(|| "flat".to_string(), |c| c.to_string());
            let anchor = h.anchor.map_or_else(|| "-".to_string(), |(c, y)| format!("{c}[{y}]"));
            let _ = writeln!(
                out,
                "head {id} `{}`: {} classes, anchor {anchor}, bottleneck {}, dilation {}, parameters {}",
                h.name,
                h.classes,
                h.config.bottleneck,
                h.config.dilation,
                self.parameter_count_with_prefix(&format!("head.{}.", h.name))
            );
        }
        let _ = writeln!(out, "total parameters: {}", self.parameter_count());
        out
    }
}
