use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::raster::rasterize_shape;
use super::{Annotation, BBox, DatasetSpec, ImageBuf, LabelKind, LabelMap, Sample, ShapeKind};
use crate::error::DataError;
use crate::hierarchy::{LabelHierarchy, LabelId, NodeId};

fn fnv(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn unit(h: u64, salt: u32) -> f64 {
    (h.rotate_left(salt * 13) % 10_007) as f64 / 10_007.0
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Appearance color of a concept. Siblings get evenly spaced hues, so the
/// children of one classifier are always told apart by color.
pub fn node_color(h: &LabelHierarchy, node: NodeId) -> [f64; 3] {
    let n = h.node(node);
    let (index, count, parent_hash) = match n.parent {
        Some(p) => {
            let sibs = &h.node(p).children;
            let i = sibs.iter().position(|&c| c == node).unwrap_or(0);
            (i, sibs.len(), fnv(h.name(p)))
        }
        None => (0, 1, 0),
    };
    let own = fnv(&n.name);
    let hue = unit(parent_hash, 1) + index as f64 / count as f64;
    hsv(hue, 0.55 + 0.4 * unit(own, 2), 0.5 + 0.45 * unit(own, 3))
}

struct Texture {
    base: [f64; 3],
    freq: f64,
    angle: f64,
}

impl Texture {
    fn of(h: &LabelHierarchy, node: NodeId) -> Self {
        let own = fnv(h.name(node));
        Self {
            base: node_color(h, node),
            freq: 0.3 + 0.9 * unit(own, 4),
            angle: std::f64::consts::PI * unit(own, 5),
        }
    }

    fn at(&self, y: usize, x: usize, noise: f64) -> [f64; 3] {
        let t = (x as f64 * self.angle.cos() + y as f64 * self.angle.sin()) * self.freq;
        let shade = 0.07 * t.sin() + noise;
        self.base.map(|c| (c + shade).clamp(0.0, 1.0))
    }
}

struct Region {
    node: NodeId,
    /// Dense label, or `None` for unlabeled scenery.
    label: Option<LabelId>,
    weight: f64,
}

fn resolve(h: &LabelHierarchy, spec: &DatasetSpec, name: &str) -> Result<NodeId, DataError> {
    h.resolve(name).map_err(|e| DataError::Spec {
        dataset: spec.name.clone(),
        reason: e.to_string(),
    })
}

/// Leaves at or below `node`, in document order.
fn leaves_under(h: &LabelHierarchy, node: NodeId) -> Vec<NodeId> {
    h.leaves().filter(|&l| h.is_ancestor_or_self(node, l)).collect()
}

/// Render one scene. Identical `seed` and geometry give identical pixels
/// regardless of `spec.annotation`.
pub fn generate_scene(seed: u64, spec: &DatasetSpec, h: &LabelHierarchy) -> Result<Sample, DataError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let height = rng.gen_range(spec.height[0]..=spec.height[1]);
    let width = rng.gen_range(spec.width[0]..=spec.width[1]);
    let area = (height * width) as f64;

    let mut regions = Vec::new();
    for l in spec.regions() {
        regions.push(Region {
            node: resolve(h, spec, &l.node)?,
            label: Some(l.id),
            weight: l.share,
        });
    }
    for b in &spec.background {
        regions.push(Region {
            node: resolve(h, spec, &b.node)?,
            label: None,
            weight: b.share,
        });
    }
    let total_weight: f64 = regions.iter().map(|r| r.weight).sum();

    // Voronoi layout with cell labels drawn in proportion to region weights.
    let cells = rng.gen_range(5..=9);
    let sites: Vec<(f64, f64, usize)> = (0..cells)
        .map(|_| {
            let mut pick = rng.gen::<f64>() * total_weight;
            let mut idx = regions.len() - 1;
            for (i, r) in regions.iter().enumerate() {
                if pick < r.weight {
                    idx = i;
                    break;
                }
                pick -= r.weight;
            }
            (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64), idx)
        })
        .collect();
    let textures: Vec<Texture> = regions.iter().map(|r| Texture::of(h, r.node)).collect();

    let mut image = ImageBuf::new(height, width);
    let mut truth = LabelMap::filled(height, width, spec.ignore_id);
    for y in 0..height {
        for x in 0..width {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let &(_, _, r) = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - yf).powi(2) + (a.1 - xf).powi(2);
                    let db = (b.0 - yf).powi(2) + (b.1 - xf).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one site");
            let noise = rng.gen_range(-0.04..0.04);
            image.set_rgb(y, x, textures[r].at(y, x, noise));
            if let Some(l) = regions[r].label {
                truth.set(y, x, l);
            }
        }
    }

    // Objects: expected count per label from its pixel share.
    let [s0, s1] = spec.object_size;
    let mean_side = (s0 + s1) as f64 / 2.0;
    let mut placed: Vec<(BBox, BBox)> = Vec::new(); // (drawn extent, annotated box)
    let mut plan: Vec<&super::LabelSpec> = Vec::new();
    for l in spec.objects() {
        let shape = l.shape.unwrap_or(ShapeKind::Circle);
        let expected = l.share * area / (shape.fill_ratio() * mean_side * mean_side);
        let mut n = expected.floor() as usize;
        if rng.gen::<f64>() < expected.fract() {
            n += 1;
        }
        plan.extend(std::iter::repeat_n(l, n));
    }
    if spec.annotation == Annotation::Bbox && plan.is_empty() {
        // a box-only image must carry at least one box
        let objects: Vec<_> = spec.objects().collect();
        let pick = objects
            .choose_weighted(&mut rng, |l| l.share)
            .map_err(|e| DataError::Spec {
                dataset: spec.name.clone(),
                reason: e.to_string(),
            })?;
        plan.push(pick);
    }
    plan.shuffle(&mut rng);

    let m = spec.box_margin;
    for l in plan {
        let shape = l.shape.unwrap_or(ShapeKind::Circle);
        let node = resolve(h, spec, &l.node)?;
        let leaves = leaves_under(h, node);
        let look = *leaves.choose(&mut rng).expect("every node has a leaf below it");
        let side = rng.gen_range(s0..=s1);
        let pad = m + 1;
        let mut spot = None;
        for _ in 0..20 {
            let x0 = rng.gen_range(pad..=width - side - pad);
            let y0 = rng.gen_range(pad..=height - side - pad);
            let overlaps = placed.iter().any(|(d, _)| {
                x0 < d.x1 + 1 && d.x0 < x0 + side + 1 && y0 < d.y1 + 1 && d.y0 < y0 + side + 1
            });
            spot = Some((x0, y0));
            if !overlaps {
                break;
            }
        }
        let (x0, y0) = spot.expect("at least one attempt");
        let drawn = BBox {
            label: l.id,
            x0,
            y0,
            x1: x0 + side,
            y1: y0 + side,
            shape,
        };
        let fill = node_color(h, look);
        for (y, x) in rasterize_shape(shape, (x0, y0, x0 + side, y0 + side), height, width) {
            let noise = rng.gen_range(-0.03..0.03);
            image.set_rgb(y, x, [0.97 + noise; 3]);
            truth.set(y, x, l.id);
        }
        for (y, x) in rasterize_shape(shape, (x0 + 1, y0 + 1, x0 + side - 1, y0 + side - 1), height, width) {
            let noise = rng.gen_range(-0.03..0.03);
            image.set_rgb(y, x, fill.map(|c| (c + noise).clamp(0.0, 1.0)));
        }
        let jitter = |rng: &mut ChaCha8Rng| m + rng.gen_range(0..=1usize);
        let annotated = BBox {
            label: l.id,
            x0: x0 - jitter(&mut rng),
            y0: y0 - jitter(&mut rng),
            x1: (x0 + side + jitter(&mut rng)).min(width),
            y1: (y0 + side + jitter(&mut rng)).min(height),
            shape,
        };
        placed.push((drawn, annotated));
    }

    let boxes: Vec<BBox> = placed.iter().map(|&(_, b)| b).collect();
    let (dense, boxes) = match spec.annotation {
        Annotation::Dense => (Some(truth), None),
        Annotation::Bbox => (None, Some(boxes)),
        Annotation::Mixed => {
            let mut dense = truth;
            for v in dense.data.iter_mut() {
                if let Some(l) = spec.label(*v).filter(|l| l.kind == LabelKind::Object) {
                    *v = l.coarse.unwrap_or(spec.ignore_id);
                }
            }
            (Some(dense), Some(boxes))
        }
    };
    Ok(Sample { image, dense, boxes })
}
