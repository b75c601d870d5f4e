//! Synthetic street-like scenes with dense, box or mixed annotations.
//!
//! Region concepts become textured areas, object concepts become small
//! bordered shapes whose fill color tells their subclass apart. The same
//! seed and geometry always produce the same pixels, whatever annotation
//! type the spec asks for, so a dense and a box-annotated corpus can share
//! images.

mod batch;
mod corpus;
mod raster;
mod resample;
mod scene;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use batch::{BatchSampler, SampleRef};
pub use corpus::{load_ppm, load_split, read_spec, save_ppm, save_split, write_corpus, CorpusSplit, Split};
pub use raster::{bbox_to_pseudo_mask, rasterize_shape, separate_instances, PseudoMask};
pub use resample::downscale_and_crop;
pub use scene::{generate_scene, node_color};

use crate::error::DataError;
use crate::hierarchy::{DatasetAnnotations, LabelHierarchy, LabelId, Supervision};
use hseg_tensor::Tensor;

/// Default sentinel for pixels that carry no label.
pub const IGNORE_ID: u32 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotation {
    Dense,
    Bbox,
    /// Regions are dense, objects come as boxes.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Painted as textured areas.
    Region,
    /// Painted as small bordered shapes.
    Object,
    /// Never painted; the dense label given to object pixels in mixed mode.
    Coarse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Triangle,
    Hexagon,
    Rectangle,
}

impl ShapeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Hexagon => "hexagon",
            ShapeKind::Rectangle => "rectangle",
        }
    }

    /// Fraction of its bounding box an ideal inscribed shape covers.
    pub fn fill_ratio(self) -> f64 {
        match self {
            ShapeKind::Circle => std::f64::consts::FRAC_PI_4,
            ShapeKind::Triangle => 0.5,
            ShapeKind::Hexagon => 0.75,
            ShapeKind::Rectangle => 1.0,
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circle" => Ok(ShapeKind::Circle),
            "triangle" => Ok(ShapeKind::Triangle),
            "hexagon" => Ok(ShapeKind::Hexagon),
            "rectangle" => Ok(ShapeKind::Rectangle),
            other => Err(format!("unknown shape `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpec {
    pub id: LabelId,
    /// Hierarchy node this label is bound to.
    pub node: String,
    pub kind: LabelKind,
    /// Regions: relative weight of the non-object area. Objects: expected
    /// fraction of image pixels. Ignored for coarse labels.
    #[serde(default)]
    pub share: f64,
    #[serde(default)]
    pub shape: Option<ShapeKind>,
    /// Objects only: label used for their pixels in the dense map of a mixed dataset.
    #[serde(default)]
    pub coarse: Option<LabelId>,
}

/// Unlabeled scenery painted behind the labeled content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub node: String,
    pub share: f64,
}

fn default_object_size() -> [usize; 2] {
    [6, 10]
}

fn default_margin() -> usize {
    1
}

fn default_ignore() -> u32 {
    IGNORE_ID
}

fn default_val_count() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub annotation: Annotation,
    pub image_count: usize,
    #[serde(default = "default_val_count")]
    pub val_count: usize,
    /// Inclusive range of image heights.
    pub height: [usize; 2],
    pub width: [usize; 2],
    /// Inclusive range of object side lengths in pixels.
    #[serde(default = "default_object_size")]
    pub object_size: [usize; 2],
    /// Annotated boxes extend this far past the drawn shape, plus up to one
    /// pixel of jitter per side.
    #[serde(default = "default_margin")]
    pub box_margin: usize,
    #[serde(default = "default_ignore")]
    pub ignore_id: u32,
    pub labels: Vec<LabelSpec>,
    #[serde(default)]
    pub background: Vec<BackgroundSpec>,
}

impl DatasetSpec {
    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        let spec: DatasetSpec = toml::from_str(text).map_err(|e| DataError::Spec {
            dataset: "<unparsed>".into(),
            reason: e.to_string(),
        })?;
        spec.check()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dataset spec serializes")
    }

    fn err(&self, reason: impl Into<String>) -> DataError {
        DataError::Spec {
            dataset: self.name.clone(),
            reason: reason.into(),
        }
    }

    pub fn label(&self, id: LabelId) -> Option<&LabelSpec> {
        self.labels.iter().find(|l| l.id == id)
    }

    pub fn regions(&self) -> impl Iterator<Item = &LabelSpec> {
        self.labels.iter().filter(|l| l.kind == LabelKind::Region)
    }

    pub fn objects(&self) -> impl Iterator<Item = &LabelSpec> {
        self.labels.iter().filter(|l| l.kind == LabelKind::Object)
    }

    /// Internal consistency, independent of any hierarchy.
    pub fn check(&self) -> Result<(), DataError> {
        let [h0, h1] = self.height;
        let [w0, w1] = self.width;
        if h0 == 0 || w0 == 0 || h0 > h1 || w0 > w1 {
            return Err(self.err("image size ranges must be non-empty and positive"));
        }
        let [s0, s1] = self.object_size;
        if s0 < 3 || s0 > s1 || s1 + 2 * (self.box_margin + 1) > h0.min(w0) {
            return Err(self.err("object sizes must be at least 3 and fit inside the smallest image"));
        }
        let mut seen = BTreeMap::new();
        for l in &self.labels {
            if l.id == self.ignore_id {
                return Err(self.err(format!("label {} collides with the ignore id", l.id)));
            }
            if seen.insert(l.id, ()).is_some() {
                return Err(self.err(format!("label {} declared twice", l.id)));
            }
            if l.kind != LabelKind::Coarse && !(l.share > 0.0 && l.share.is_finite()) {
                return Err(self.err(format!("label {} needs a positive share", l.id)));
            }
        }
        for l in &self.labels {
            if let Some(c) = l.coarse {
                match self.label(c) {
                    Some(t) if t.kind == LabelKind::Coarse && l.kind == LabelKind::Object => {}
                    _ => return Err(self.err(format!("label {}: `coarse` must name a coarse label", l.id))),
                }
            }
        }
        if self.background.iter().any(|b| !(b.share > 0.0)) {
            return Err(self.err("background shares must be positive"));
        }
        let object_share: f64 = self.objects().map(|l| l.share).sum();
        if object_share >= 1.0 {
            return Err(self.err(format!("object shares sum to {object_share:.3}, which exceeds the canvas")));
        }
        if self.regions().next().is_none() && self.background.is_empty() {
            return Err(self.err("nothing to paint the scene background with"));
        }
        if self.annotation == Annotation::Bbox && self.regions().next().is_some() {
            return Err(self.err("a bbox dataset cannot annotate regions; list them as background"));
        }
        if self.annotation == Annotation::Bbox && self.objects().next().is_none() {
            return Err(self.err("a bbox dataset needs at least one object label"));
        }
        Ok(())
    }

    /// How each label reaches the network, for hierarchy validation.
    pub fn annotations(&self) -> DatasetAnnotations {
        let labels = self
            .labels
            .iter()
            .map(|l| {
                let kind = match (self.annotation, l.kind) {
                    (Annotation::Dense, _) => Supervision::Dense,
                    (Annotation::Bbox, _) => Supervision::Boxes,
                    (Annotation::Mixed, LabelKind::Object) => Supervision::Boxes,
                    (Annotation::Mixed, _) => Supervision::Dense,
                };
                (l.id, kind)
            })
            .collect();
        DatasetAnnotations {
            name: self.name.clone(),
            labels,
        }
    }

    /// Bind every label of this spec into `h`.
    pub fn bind(&self, h: &mut LabelHierarchy) -> Result<(), crate::error::HierarchyError> {
        h.bind_dataset(&self.name, self.labels.iter().map(|l| (l.id, l.node.as_str())))
    }

    /// The same spec with another annotation type; scenes stay pixel-identical.
    pub fn with_annotation(&self, annotation: Annotation) -> Self {
        Self {
            annotation,
            ..self.clone()
        }
    }
}

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let area = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * area + y * self.width + x] = v;
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone()).expect("image buffer size")
    }
}

/// Per-pixel label ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u32) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel count per label id.
    pub fn histogram(&self) -> BTreeMap<u32, u64> {
        let mut h = BTreeMap::new();
        for &v in &self.data {
            *h.entry(v).or_insert(0) += 1;
        }
        h
    }
}

/// Axis-aligned box with exclusive upper corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub label: LabelId,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub shape: ShapeKind,
}

impl BBox {
    pub fn is_degenerate(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> usize {
        if self.is_degenerate() {
            0
        } else {
            (self.x1 - self.x0) * (self.y1 - self.y0)
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageBuf,
    pub dense: Option<LabelMap>,
    pub boxes: Option<Vec<BBox>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

/// Mix a base seed with any number of stream identifiers.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer over a running state
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
