use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BBox, ImageBuf, LabelMap, Sample};
use crate::error::DataError;

/// Source intervals `[i*s, (i+1)*s)` as (source index, weight) lists.
fn area_taps(src: usize, dst: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    (0..dst)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, ((i + 1) as f64 * scale).min(src as f64));
            let mut taps = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < src {
                let w = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if w > 0.0 {
                    taps.push((k, w));
                }
                k += 1;
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

fn area_resize(img: &ImageBuf, out_h: usize, out_w: usize, scale: f64) -> ImageBuf {
    let rows = area_taps(img.height, out_h, scale);
    let cols = area_taps(img.width, out_w, scale);
    let mut out = ImageBuf::new(out_h, out_w);
    for c in 0..3 {
        for (y, ry) in rows.iter().enumerate() {
            for (x, rx) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for &(sy, wy) in ry {
                    for &(sx, wx) in rx {
                        acc += wy * wx * img.get(c, sy, sx);
                    }
                }
                out.data[(c * out_h + y) * out_w + x] = acc;
            }
        }
    }
    out
}

fn nearest(src: usize, i: usize, scale: f64) -> usize {
    (((i as f64 + 0.5) * scale) as usize).min(src - 1)
}

/// Downscale so the image just covers `target_h x target_w` while keeping
/// its aspect ratio, then crop a window at a seed-chosen offset.
///
/// Images use area averaging, label maps nearest neighbor. Boxes are scaled
/// outward to whole pixels, clipped, and dropped once nothing is left.
pub fn downscale_and_crop(sample: &Sample, target_h: usize, target_w: usize, seed: u64) -> Result<Sample, DataError> {
    let (h, w) = (sample.height(), sample.width());
    if target_h == 0 || target_w == 0 || target_h > h || target_w > w {
        return Err(DataError::Geometry(format!(
            "cannot crop {target_h}x{target_w} out of a {h}x{w} image"
        )));
    }
    let scale = (h as f64 / target_h as f64).min(w as f64 / target_w as f64);
    let nh = ((h as f64 / scale).round() as usize).max(target_h);
    let nw = ((w as f64 / scale).round() as usize).max(target_w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.gen_range(0..=nh - target_h);
    let ox = rng.gen_range(0..=nw - target_w);

    let resized = area_resize(&sample.image, nh, nw, scale);
    let mut image = ImageBuf::new(target_h, target_w);
    for c in 0..3 {
        for y in 0..target_h {
            for x in 0..target_w {
                image.data[(c * target_h + y) * target_w + x] = resized.get(c, y + oy, x + ox);
            }
        }
    }

    let dense = sample.dense.as_ref().map(|m| {
        let mut out = LabelMap::filled(target_h, target_w, 0);
        for y in 0..target_h {
            for x in 0..target_w {
                out.set(y, x, m.get(nearest(h, y + oy, scale), nearest(w, x + ox, scale)));
            }
        }
        out
    });

    let boxes = sample.boxes.as_ref().map(|bs| {
        bs.iter()
            .filter_map(|b| {
                let map = |v: usize, off: usize, lim: usize, up: bool| {
                    let s = v as f64 / scale;
                    let s = if up { s.ceil() } else { s.floor() };
                    (s as i64 - off as i64).clamp(0, lim as i64) as usize
                };
                let out = BBox {
                    x0: map(b.x0, ox, target_w, false),
                    y0: map(b.y0, oy, target_h, false),
                    x1: map(b.x1, ox, target_w, true),
                    y1: map(b.y1, oy, target_h, true),
                    ..*b
                };
                (!out.is_degenerate()).then_some(out)
            })
            .collect()
    });

    Ok(Sample { image, dense, boxes })
}
