//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use hseg_core::hierarchy::{parse_hierarchy, ClassifierId, LabelHierarchy};
use hseg_core::network::{HeadConfig, Network, NetworkConfig, Pass};
use hseg_core::training::{hierarchical_loss, total_loss, ClassifierSupervision, LossWeights};
use hseg_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Random per-pixel distributions over axis 1, bounded away from zero.
pub fn random_probs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (n, c, area) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut t = Tensor::from_fn(shape, |_| rng.gen_range(0.01..1.0));
    let d = t.data_mut();
    for i in 0..n {
        for p in 0..area {
            let s: f64 = (0..c).map(|k| d[i * c * area + k * area + p]).sum();
            for k in 0..c {
                d[i * c * area + k * area + p] /= s;
            }
        }
    }
    t
}

pub fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        output_stride: 4,
        stem_width: 2,
        blocks: 1,
        block_dilation: 2,
        rep_depth: 4,
        head: HeadConfig { bottleneck: 2, dilation: 1 },
        ..NetworkConfig::default()
    }
}

/// `root{a, b{b1, b2}}`: two classifiers.
pub fn toy_hierarchy() -> LabelHierarchy {
    parse_hierarchy("root\n  a\n  b\n    b1\n    b2\n").unwrap()
}

/// Dense supervision for both toy classifiers over `n` images of `h x w`.
pub fn toy_supervision(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<ClassifierSupervision> {
    let mut root = ClassifierSupervision::default();
    let mut sub = ClassifierSupervision::default();
    for p in 0..n * h * w {
        match rng.gen_range(0..3) {
            0 => root.p1.push((p, 0)),
            k => {
                root.p1.push((p, 1));
                sub.p1.push((p, k - 1));
            }
        }
    }
    vec![root, sub]
}

/// Total training loss of `net` and the parameter bindings of its tape.
pub fn network_loss(
    net: &mut Network,
    h: &LabelHierarchy,
    images: &Tensor,
    sup: &[ClassifierSupervision],
) -> (f64, Tape, Var, Vec<(hseg_tensor::ParamId, Var)>) {
    let mut tape = Tape::new();
    let mut pass = Pass::train(&mut tape, net);
    let x = pass.tape.constant(images.clone());
    let (_, probs) = net.forward_all(&mut pass, x).unwrap();
    let mut losses = Vec::new();
    for (j, s) in sup.iter().enumerate() {
        losses.push((ClassifierId(j), hierarchical_loss(pass.tape, probs[j], s).unwrap()));
    }
    let weights = LossWeights { lambdas: vec![1.0, 0.5], decay: 0.0 };
    let loss = total_loss(pass.tape, h, &losses, &weights, &net.params).unwrap();
    let bindings = pass.bindings();
    let value = tape.value(loss).item();
    (value, tape, loss, bindings)
}

/// Backpropagated against central-difference gradients of the toy network's loss.
pub struct NetworkCheck {
    /// Per-parameter relative error over every coordinate.
    pub errors: Vec<(String, f64)>,
    /// Coordinates whose `+-step` stencil flips some rectifier input's sign.
    pub kinked: usize,
    pub coordinates: usize,
}

impl NetworkCheck {
    pub fn worst(&self) -> (String, f64) {
        self.errors.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }
}

/// Gradient check of the toy network at 16x16 with two images.
pub fn network_gradcheck(seed: u64, step: f64) -> NetworkCheck {
    network_gradcheck_at(seed, step, 2, 16)
}

pub fn network_gradcheck_at(seed: u64, step: f64, n: usize, size: usize) -> NetworkCheck {
    let h = toy_hierarchy();
    let mut net = Network::build(&h, &tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let images = Tensor::from_fn(&[n, 3, size, size], |_| rng.gen_range(0.0..1.0));
    let sup = toy_supervision(&mut rng, n, size, size);
    let (_, mut tape, loss, bindings) = network_loss(&mut net, &h, &images, &sup);
    let pattern = tape.relu_pattern();
    tape.backward(loss).unwrap();
    net.params.collect_grads(&mut tape, &bindings);
    let analytic: Vec<Tensor> = net.params.iter().map(|p| p.grad.clone().unwrap()).collect();
    let mut check = NetworkCheck { errors: Vec::new(), kinked: 0, coordinates: 0 };
    for (k, a) in analytic.iter().enumerate() {
        let id = hseg_tensor::ParamId::from_index(k);
        let mut numeric = Tensor::zeros(a.shape());
        for i in 0..a.numel() {
            let orig = net.params.get(id).value.data()[i];
            net.params.get_mut(id).value.data_mut()[i] = orig + step;
            let (plus, t_plus, _, _) = network_loss(&mut net, &h, &images, &sup);
            net.params.get_mut(id).value.data_mut()[i] = orig - step;
            let (minus, t_minus, _, _) = network_loss(&mut net, &h, &images, &sup);
            net.params.get_mut(id).value.data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * step);
            check.coordinates += 1;
            if t_plus.relu_pattern() != pattern || t_minus.relu_pattern() != pattern {
                check.kinked += 1;
            }
        }
        let diff: f64 = a.data().iter().zip(numeric.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let scale = a.sum_of_squares().sqrt().max(numeric.sum_of_squares().sqrt()).max(1e-8);
        check.errors.push((net.params.get(id).name.clone(), diff / scale));
    }
    check
}

/// Central differences only measure the derivative when no rectifier input
/// changes sign inside the stencil; such test points are redrawn.
/// Returns the check and the number of points discarded.
pub fn kink_free_gradcheck(seed: u64, step: f64) -> (NetworkCheck, usize) {
    for attempt in 0..10 {
        let check = network_gradcheck(seed + 1000 * attempt as u64, step);
        if check.kinked == 0 {
            return (check, attempt);
        }
    }
    panic!("no kink-free test point for seed {seed} in 10 draws");
}
