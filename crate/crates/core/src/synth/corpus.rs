//! Corpus layout on disk:
//!
//! ```text
//! <root>/<dataset>/spec.toml
//! <root>/<dataset>/{train,val}/00000.ppm      image
//! <root>/<dataset>/{train,val}/00000.pgm      dense labels, when annotated
//! <root>/<dataset>/{train,val}/00000.boxes    `label x0 y0 x1 y1 shape` lines, when annotated
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, RgbImage};

use super::{derive_seed, generate_scene, Annotation, BBox, DatasetSpec, ImageBuf, LabelMap, Sample};
use crate::error::{DataError, Error, IoContext, Result};
use crate::hierarchy::LabelHierarchy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One split of one dataset, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub spec: DatasetSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl CorpusSplit {
    /// Generate a split. Training samples carry the spec's annotation type;
    /// validation samples carry full dense labels plus boxes, so every level
    /// can be scored.
    pub fn generate(spec: &DatasetSpec, h: &LabelHierarchy, seed: u64, split: Split) -> Result<Self> {
        let count = match split {
            Split::Train => spec.image_count,
            Split::Val => spec.val_count,
        };
        let stream = spec.name.bytes().fold(0u64, |a, b| a.wrapping_mul(131).wrapping_add(u64::from(b)));
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let s = derive_seed(seed, &[stream, split as u64, i as u64]);
            let sample = match split {
                Split::Train => generate_scene(s, spec, h)?,
                Split::Val => {
                    let dense = generate_scene(s, &spec.with_annotation(Annotation::Dense), h)?;
                    let boxes = if spec.objects().next().is_some() {
                        generate_scene(s, &spec.with_annotation(Annotation::Mixed), h)?.boxes
                    } else {
                        None
                    };
                    Sample { boxes, ..dense }
                }
            };
            samples.push(sample);
        }
        Ok(Self {
            spec: spec.clone(),
            split,
            samples,
        })
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    DataError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
    .into()
}

fn write_boxes(path: &Path, boxes: &[BBox]) -> Result<()> {
    let mut text = String::new();
    for b in boxes {
        let _ = writeln!(text, "{} {} {} {} {} {}", b.label, b.x0, b.y0, b.x1, b.y1, b.shape);
    }
    fs::write(path, text).context(|| format!("writing {}", path.display()))
}

fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    let text = fs::read_to_string(path).context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 6 {
            return Err(format_err(path, format!("line {}: expected `label x0 y0 x1 y1 shape`", i + 1)));
        }
        let num = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| format_err(path, format!("line {}: bad number `{s}`", i + 1)))
        };
        out.push(BBox {
            label: num(f[0])? as u32,
            x0: num(f[1])?,
            y0: num(f[2])?,
            x1: num(f[3])?,
            y1: num(f[4])?,
            shape: f[5].parse().map_err(|e: String| format_err(path, format!("line {}: {e}", i + 1)))?,
        });
    }
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB image as a binary PPM.
pub fn save_ppm(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut buf = RgbImage::new(img.width as u32, img.height as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        *px = image::Rgb([to_u8(img.get(0, y, x)), to_u8(img.get(1, y, x)), to_u8(img.get(2, y, x))]);
    }
    buf.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| format_err(path, e.to_string()))
}

/// Read any portable anymap as an RGB image in `[0, 1]`.
pub fn load_ppm(path: &Path) -> Result<ImageBuf> {
    let rgb = image::open(path).map_err(|e| format_err(path, e.to_string()))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ImageBuf::new(h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        img.set_rgb(y as usize, x as usize, px.0.map(|c| f64::from(c) / 255.0));
    }
    Ok(img)
}

fn save_pgm(path: &Path, map: &LabelMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.data.len());
    for &v in &map.data {
        bytes.push(u8::try_from(v).map_err(|_| format_err(path, format!("label {v} does not fit a graymap")))?);
    }
    let buf = GrayImage::from_raw(map.width as u32, map.height as u32, bytes).expect("buffer size");
    buf.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| format_err(path, e.to_string()))
}

fn load_pgm(path: &Path) -> Result<LabelMap> {
    let g = image::open(path).map_err(|e| format_err(path, e.to_string()))?.to_luma8();
    Ok(LabelMap {
        height: g.height() as usize,
        width: g.width() as usize,
        data: g.into_raw().into_iter().map(u32::from).collect(),
    })
}

fn split_dir(dataset_dir: &Path, split: Split) -> PathBuf {
    dataset_dir.join(split.as_str())
}

/// Write one split under `dataset_dir`, replacing the spec file.
pub fn save_split(dataset_dir: &Path, split: &CorpusSplit) -> Result<()> {
    let dir = split_dir(dataset_dir, split.split);
    fs::create_dir_all(&dir).context(|| format!("creating {}", dir.display()))?;
    let spec_path = dataset_dir.join("spec.toml");
    fs::write(&spec_path, split.spec.to_toml()).context(|| format!("writing {}", spec_path.display()))?;
    for (i, s) in split.samples.iter().enumerate() {
        save_ppm(&dir.join(format!("{i:05}.ppm")), &s.image)?;
        if let Some(d) = &s.dense {
            save_pgm(&dir.join(format!("{i:05}.pgm")), d)?;
        }
        if let Some(b) = &s.boxes {
            write_boxes(&dir.join(format!("{i:05}.boxes")), b)?;
        }
    }
    Ok(())
}

pub fn read_spec(dataset_dir: &Path) -> Result<DatasetSpec> {
    let path = dataset_dir.join("spec.toml");
    let text = fs::read_to_string(&path).context(|| format!("reading {}", path.display()))?;
    Ok(DatasetSpec::from_toml(&text)?)
}

/// Read one split written by [`save_split`].
pub fn load_split(dataset_dir: &Path, split: Split) -> Result<CorpusSplit> {
    let spec = read_spec(dataset_dir)?;
    let dir = split_dir(dataset_dir, split);
    let mut samples = Vec::new();
    for i in 0.. {
        let img_path = dir.join(format!("{i:05}.ppm"));
        if !img_path.exists() {
            break;
        }
        let image = load_ppm(&img_path)?;
        let dense_path = dir.join(format!("{i:05}.pgm"));
        let dense = if dense_path.exists() { Some(load_pgm(&dense_path)?) } else { None };
        let box_path = dir.join(format!("{i:05}.boxes"));
        let boxes = if box_path.exists() { Some(read_boxes(&box_path)?) } else { None };
        if dense.is_none() && boxes.is_none() {
            return Err(format_err(&img_path, "image has neither labels nor boxes"));
        }
        samples.push(Sample { image, dense, boxes });
    }
    if samples.is_empty() {
        return Err(DataError::EmptyDataset(dir.display().to_string()).into());
    }
    Ok(CorpusSplit { spec, split, samples })
}

/// Generate and write both splits of a dataset under `root/<name>`.
pub fn write_corpus(root: &Path, spec: &DatasetSpec, h: &LabelHierarchy, seed: u64) -> Result<PathBuf> {
    let dir = root.join(&spec.name);
    for split in [Split::Train, Split::Val] {
        save_split(&dir, &CorpusSplit::generate(spec, h, seed, split)?)?;
    }
    Ok(dir)
}
