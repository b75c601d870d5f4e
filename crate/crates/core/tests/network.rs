mod common;

use std::fs;

use common::{configs, kink_free_gradcheck, tiny_config, toy_hierarchy};
use hseg_core::hierarchy::parse_hierarchy;
use hseg_core::network::{HeadConfig, Network, NetworkConfig, Pass};
use hseg_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(seed: u64, n: usize, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 3, h, w], |_| rng.gen_range(0.0..1.0))
}

fn channel_sums_are_one(t: &Tensor) -> bool {
    let s = t.shape();
    let area = s[2] * s[3];
    (0..s[0]).all(|i| {
        (0..area).all(|p| {
            let sum: f64 = (0..s[1]).map(|k| t.data()[i * s[1] * area + k * area + p]).sum();
            (sum - 1.0).abs() < 1e-12
        })
    })
}

#[test]
fn representation_shape_and_single_shared_pass() {
    let h = toy_hierarchy();
    let cfg = NetworkConfig { output_stride: 8, rep_depth: 32, ..NetworkConfig::default() };
    let mut net = Network::build(&h, &cfg, 0).unwrap();
    let mut tape = Tape::new();
    let mut pass = Pass::eval(&mut tape, &net);
    let x = pass.tape.constant(images(1, 1, 64, 64));
    let (rep, probs) = net.forward_all(&mut pass, x).unwrap();
    assert_eq!(tape.value(rep).shape(), &[1, 32, 8, 8]);
    assert_eq!(net.shared_evaluations(), 1);
    assert_eq!(tape.value(probs[0]).shape(), &[1, 2, 64, 64]);
    assert_eq!(tape.value(probs[1]).shape(), &[1, 2, 64, 64]);
    assert!(probs.iter().all(|&p| channel_sums_are_one(tape.value(p))));
}

#[test]
fn indivisible_input_is_rejected_with_a_hint() {
    let mut net = Network::build(&toy_hierarchy(), &tiny_config(), 0).unwrap();
    let err = net.predict(&images(0, 1, 18, 16)).unwrap_err();
    assert!(err.to_string().contains("pad or crop"));
}

#[test]
fn eval_forward_is_deterministic() {
    let mut net = Network::build(&toy_hierarchy(), &tiny_config(), 4).unwrap();
    let x = images(2, 2, 16, 16);
    assert_eq!(net.predict(&x).unwrap(), net.predict(&x).unwrap());
}

#[test]
fn zeroed_head_gives_uniform_probabilities() {
    let h = parse_hierarchy("root\n  a\n  b\n  c\n").unwrap();
    let mut net = Network::build(&h, &tiny_config(), 0).unwrap();
    for p in net.params.iter_mut().filter(|p| p.name.starts_with("head.")) {
        p.value = Tensor::zeros(p.value.shape());
    }
    let out = net.predict(&images(3, 1, 16, 16)).unwrap();
    assert!(out[0].data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
}

#[test]
fn street_config_builds_five_branches() {
    let h = parse_hierarchy(&fs::read_to_string(configs().join("street108.hier")).unwrap()).unwrap();
    let net = Network::build(&h, &tiny_config(), 0).unwrap();
    assert_eq!(net.heads.len(), 5);
    let anchors: Vec<_> = net.heads.iter().map(|c| c.anchor.is_some()).collect();
    assert_eq!(anchors, [false, true, true, true, true]);
    assert!(net.describe().contains("total parameters"));
}

#[test]
fn doubling_the_bottleneck_doubles_the_spatial_stage() {
    let h = toy_hierarchy();
    let count = |b: usize| {
        let cfg = NetworkConfig { head: HeadConfig { bottleneck: b, dilation: 1 }, ..tiny_config() };
        Network::build(&h, &cfg, 0).unwrap().parameter_count_with_prefix("head.root.spatial.")
    };
    assert_eq!(count(8), 2 * count(4));
    // closed form: 3x3 conv rep->b without bias, plus BN scale and shift
    let rep = tiny_config().rep_depth;
    assert_eq!(count(4), 9 * rep * 4 + 2 * 4);
}

#[test]
fn flat_head_matches_one_classifier_network() {
    let mut h = parse_hierarchy("root\n  a\n  b\n  c\n").unwrap();
    h.bind_dataset("d", [(0, "a"), (1, "b"), (2, "c")]).unwrap();
    let hier = Network::build(&h, &tiny_config(), 0).unwrap();
    let flat = Network::build_flat(&h.flatten_union(false), &tiny_config(), 0).unwrap();
    let shapes = |n: &Network| n.params.iter().map(|p| p.value.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&hier), shapes(&flat));
    let mut with_unlabeled = Network::build_flat(&h.flatten_union(true), &tiny_config(), 0).unwrap();
    let out = with_unlabeled.predict(&images(0, 1, 16, 16)).unwrap();
    assert_eq!(out[0].shape()[1], 4);
    assert!(channel_sums_are_one(&out[0]));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let (check, _) = kink_free_gradcheck(0, 1e-4);
    for (name, err) in check.errors {
        assert!(err < 1e-3, "{name}: relative error {err}");
    }
}
