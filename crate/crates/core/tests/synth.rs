use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::PathBuf;

use hseg_core::hierarchy::{parse_hierarchy, LabelHierarchy};
use hseg_core::synth::{
    bbox_to_pseudo_mask, downscale_and_crop, generate_scene, separate_instances, Annotation, BBox, BatchSampler, DatasetSpec,
    ImageBuf, LabelKind, LabelMap, Sample, ShapeKind,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sign_setup() -> (LabelHierarchy, DatasetSpec) {
    let mut h = parse_hierarchy("root\n  road\n  grass\n  sign\n    stop\n    yield\n").unwrap();
    let spec = DatasetSpec::from_toml(
        r#"
name = "share"
annotation = "dense"
image_count = 1
height = [64, 64]
width = [64, 64]
[[labels]]
id = 0
node = "road"
kind = "region"
share = 1.0
[[labels]]
id = 1
node = "grass"
kind = "region"
share = 1.0
[[labels]]
id = 2
node = "stop"
kind = "object"
share = 0.01
shape = "hexagon"
[[labels]]
id = 3
node = "yield"
kind = "object"
share = 0.01
shape = "triangle"
"#,
    )
    .unwrap();
    spec.bind(&mut h).unwrap();
    (h, spec)
}

#[test]
fn realized_subclass_share_is_near_its_target() {
    let (h, spec) = sign_setup();
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    let mut total = 0u64;
    for seed in 0..100 {
        let s = generate_scene(seed, &spec, &h).unwrap();
        let d = s.dense.unwrap();
        for (k, v) in d.histogram() {
            *counts.entry(k).or_default() += v;
        }
        total += d.data.len() as u64;
    }
    for id in [2, 3] {
        let share = counts.get(&id).copied().unwrap_or(0) as f64 / total as f64;
        assert!((0.005..=0.02).contains(&share), "label {id}: share {share}");
    }
}

#[test]
fn scenes_are_deterministic() {
    let (h, spec) = sign_setup();
    assert_eq!(generate_scene(9, &spec, &h).unwrap(), generate_scene(9, &spec, &h).unwrap());
    assert_ne!(generate_scene(9, &spec, &h).unwrap().image, generate_scene(10, &spec, &h).unwrap().image);
}

/// Component sizes by breadth-first flood fill from every unvisited pixel.
fn flood_fill_oracle(mask: &[bool], h: usize, w: usize) -> Vec<BTreeSet<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.insert(p);
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

#[test]
fn blobs_split_by_a_background_row() {
    let (h, w) = (3, 4);
    let mut mask = vec![true; h * w];
    for x in 0..w {
        mask[w + x] = false;
    }
    assert_eq!(separate_instances(&mask, h, w).len(), 2);
}

proptest! {
    #[test]
    fn components_match_flood_fill(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, density in 0.1f64..0.7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(density)).collect();
        let got: BTreeSet<BTreeSet<usize>> =
            separate_instances(&mask, h, w).into_iter().map(|c| c.into_iter().collect()).collect();
        let want: BTreeSet<BTreeSet<usize>> = flood_fill_oracle(&mask, h, w).into_iter().collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn pseudo_masks_stay_inside_their_boxes(seed in any::<u64>(), n in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (24, 30);
        let shapes = [ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Hexagon, ShapeKind::Rectangle];
        let boxes: Vec<BBox> = (0..n)
            .map(|i| {
                let (x0, y0) = (rng.gen_range(0..w), rng.gen_range(0..h));
                BBox {
                    label: i as u32,
                    x0,
                    y0,
                    x1: rng.gen_range(x0..=w),
                    y1: rng.gen_range(y0..=h),
                    shape: shapes[rng.gen_range(0..4)],
                }
            })
            .collect();
        let mask = bbox_to_pseudo_mask(&boxes, h, w, 255);
        prop_assert!(mask.from_boxes);
        for y in 0..h {
            for x in 0..w {
                let v = mask.labels.get(y, x);
                if v != 255 {
                    prop_assert!(boxes[v as usize].contains(y, x));
                }
            }
        }
    }

    #[test]
    fn resampled_labels_introduce_no_new_ids(seed in any::<u64>(), sh in 20usize..60, sw in 20usize..60, th in 8usize..20, tw in 8usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = LabelMap::filled(sh, sw, 0);
        for v in &mut dense.data {
            *v = rng.gen_range(0..6);
        }
        let before: BTreeSet<u32> = dense.histogram().into_keys().collect();
        let s = Sample { image: ImageBuf::new(sh, sw), dense: Some(dense), boxes: None };
        let out = downscale_and_crop(&s, th, tw, seed).unwrap();
        let d = out.dense.unwrap();
        prop_assert_eq!((d.height, d.width), (th, tw));
        prop_assert!(d.histogram().keys().all(|k| before.contains(k)));
    }
}

#[test]
fn one_two_one_ratios_compose_a_b_b_c() {
    let sampler = BatchSampler::new(&[5, 7, 3], &[1, 2, 1], 4, true).unwrap();
    assert_eq!(sampler.batch_size(), 4);
    for step in 0..20 {
        let ds: Vec<usize> = sampler.batch(step).iter().map(|r| r.dataset).collect();
        assert_eq!(ds, [0, 1, 1, 2]);
    }
}

#[test]
fn shipped_corpora_reproduce_the_three_challenges() {
    let mut h = parse_hierarchy(&fs::read_to_string(configs().join("street108.hier")).unwrap()).unwrap();
    let specs: Vec<DatasetSpec> = ["cityscapes-like", "vistas-like", "gtsdb-like"]
        .iter()
        .map(|n| DatasetSpec::from_toml(&fs::read_to_string(configs().join(format!("datasets/{n}.toml"))).unwrap()).unwrap())
        .collect();
    for s in &specs {
        s.bind(&mut h).unwrap();
    }
    let ts = h.find("traffic_sign").unwrap();
    let node_of = |s: &DatasetSpec, id: u32| h.bound_node(&s.name, id).unwrap();
    // (a) one dataset labels the coarse node, another its descendants
    assert!(specs[0].labels.iter().any(|l| node_of(&specs[0], l.id) == ts));
    assert!(specs[1].labels.iter().any(|l| {
        let n = node_of(&specs[1], l.id);
        n != ts && h.is_ancestor_or_self(ts, n)
    }));
    // (b) one dataset has boxes only
    assert_eq!(specs[2].annotation, Annotation::Bbox);
    let s = generate_scene(0, &specs[2], &h).unwrap();
    assert!(s.dense.is_none() && !s.boxes.unwrap().is_empty());
    // (c) realized leaf shares span at least two orders of magnitude
    let mut hist: BTreeMap<u32, u64> = BTreeMap::new();
    for seed in 0..20 {
        for (k, v) in generate_scene(seed, &specs[1], &h).unwrap().dense.unwrap().histogram() {
            *hist.entry(k).or_default() += v;
        }
    }
    let object_ids: BTreeSet<u32> = specs[1].labels.iter().filter(|l| l.kind == LabelKind::Object).map(|l| l.id).collect();
    let largest = hist.iter().filter(|(k, _)| !object_ids.contains(k)).map(|(_, v)| *v).max().unwrap();
    let smallest = hist.iter().filter(|(k, _)| object_ids.contains(k)).map(|(_, v)| *v).min().unwrap();
    assert!(largest as f64 / smallest as f64 >= 100.0, "{largest} vs {smallest}");
}
