//! Top-down decisions, composition into one segmentation, and export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hseg_tensor::Tensor;

use crate::error::{Error, HierarchyError, IoContext, Result};
use crate::hierarchy::{LabelHierarchy, NodeId};
use crate::synth::node_color;

/// Per-pixel argmax over axis 1 of `[N, C, H, W]`, ties to the lowest index.
/// Pixels are numbered `n * H * W + y * W + x`.
pub fn argmax_channels(probs: &Tensor) -> Vec<u32> {
    let s = probs.shape();
    let (n, c) = (s[0], s[1]);
    let area: usize = s[2..].iter().product();
    let d = probs.data();
    let mut out = Vec::with_capacity(n * area);
    for i in 0..n {
        let base = i * c * area;
        for p in 0..area {
            let mut best = 0;
            for k in 1..c {
                if d[base + k * area + p] > d[base + best * area + p] {
                    best = k;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

/// Decisions of every classifier, restricted to the pixels routed to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionMaps {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    /// `decisions[j][p]` is `Some(class)` exactly when `p` lies in `P^j`.
    pub decisions: Vec<Vec<Option<u32>>>,
}

impl DecisionMaps {
    pub fn pixels(&self) -> usize {
        self.images * self.height * self.width
    }

    /// Routing mask `P^j`.
    pub fn mask(&self, j: usize) -> Vec<bool> {
        self.decisions[j].iter().map(Option::is_some).collect()
    }
}

/// Apply the decision rule: the root decides every pixel, every other
/// classifier decides the pixels its parent assigned to its anchor class.
pub fn decide(h: &LabelHierarchy, probs: &[Tensor]) -> Result<DecisionMaps> {
    if probs.len() != h.classifiers().len() || probs.is_empty() {
        return Err(Error::Config(format!(
            "{} probability maps for {} classifiers",
            probs.len(),
            h.classifiers().len()
        )));
    }
    let (n, _, height, width) = probs[0].dims4()?;
    let mut decisions: Vec<Vec<Option<u32>>> = Vec::with_capacity(probs.len());
    for (c, p) in h.classifiers().iter().zip(probs) {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, height, width) || pc != c.classes.len() {
            return Err(Error::Config(format!(
                "classifier {} expects {} maps of {}x{}x{}, got {:?}",
                c.id,
                c.classes.len(),
                n,
                height,
                width,
                p.shape()
            )));
        }
        let arg = argmax_channels(p);
        let routed: Vec<Option<u32>> = match c.anchor {
            None => arg.into_iter().map(Some).collect(),
            Some((parent, y)) => arg
                .into_iter()
                .zip(&decisions[parent.0])
                .map(|(a, d)| (*d == Some(y as u32)).then_some(a))
                .collect(),
        };
        decisions.push(routed);
    }
    Ok(DecisionMaps {
        images: n,
        height,
        width,
        decisions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detail {
    /// Follow decisions as deep as they go.
    Finest,
    /// Stop at this level (1 = children of the root).
    Level(usize),
}

/// One concept per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub nodes: Vec<NodeId>,
}

impl Segmentation {
    pub fn image(&self, i: usize) -> &[NodeId] {
        let a = self.height * self.width;
        &self.nodes[i * a..(i + 1) * a]
    }
}

/// Chain per-classifier decisions into a single node per pixel.
pub fn compose(d: &DecisionMaps, h: &LabelHierarchy, detail: Detail) -> Result<Segmentation> {
    let max_level = match detail {
        Detail::Finest => usize::MAX,
        Detail::Level(l) if l == 0 || l > h.depth() => {
            return Err(HierarchyError::LevelTooDeep {
                requested: l,
                depth: h.depth(),
            }
            .into())
        }
        Detail::Level(l) => l,
    };
    let mut nodes = Vec::with_capacity(d.pixels());
    for p in 0..d.pixels() {
        let mut cur = h.root();
        while h.node(cur).level < max_level {
            let Some(c) = h.classifier_of(cur) else { break };
            let y = d.decisions[c.0][p].expect("routing reaches every classifier on the chosen path");
            cur = h.node(cur).children[y as usize];
        }
        nodes.push(cur);
    }
    Ok(Segmentation {
        images: d.images,
        height: d.height,
        width: d.width,
        nodes,
    })
}

pub type Palette = BTreeMap<NodeId, [u8; 3]>;

/// Colors for every node, from the same appearance model used to draw scenes.
pub fn default_palette(h: &LabelHierarchy) -> Palette {
    (0..h.node_count())
        .map(NodeId)
        .map(|n| (n, node_color(h, n).map(|c| (c * 255.0).round() as u8)))
        .collect()
}

/// Binary PPM bytes of image `index` colored by `palette`.
pub fn render_ppm(s: &Segmentation, index: usize, palette: &Palette) -> Result<Vec<u8>> {
    if s.height == 0 || s.width == 0 {
        return Err(Error::Config("cannot export an empty image".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", s.width, s.height).into_bytes();
    for n in s.image(index) {
        let rgb = palette
            .get(n)
            .ok_or_else(|| Error::Config(format!("palette has no color for node {}", n.0)))?;
        out.extend_from_slice(rgb);
    }
    Ok(out)
}

/// Pixel count per node of one image.
pub fn histogram(s: &Segmentation, index: usize) -> BTreeMap<NodeId, u64> {
    let mut out = BTreeMap::new();
    for &n in s.image(index) {
        *out.entry(n).or_insert(0) += 1;
    }
    out
}

pub fn format_histogram(h: &LabelHierarchy, hist: &BTreeMap<NodeId, u64>) -> String {
    let total: u64 = hist.values().sum();
    let mut out = String::new();
    for (n, c) in hist {
        let _ = writeln!(out, "{:<24} {:>8} {:>7.3}%", h.name(*n), c, 100.0 * *c as f64 / total as f64);
    }
    out
}

/// Write `<stem>.ppm` for image `index` and return its path and histogram.
pub fn export(
    s: &Segmentation,
    index: usize,
    palette: &Palette,
    dir: &Path,
    stem: &str,
) -> Result<(PathBuf, BTreeMap<NodeId, u64>)> {
    let bytes = render_ppm(s, index, palette)?;
    fs::create_dir_all(dir).context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(format!("{stem}.ppm"));
    fs::write(&path, bytes).context(|| format!("writing {}", path.display()))?;
    Ok((path, histogram(s, index)))
}
