//! Shape rasterization, box-to-mask conversion and connected components.

use std::collections::VecDeque;

use super::{BBox, LabelMap, ShapeKind};

/// Is the pixel center `(px, py)` inside `shape` inscribed in `[x0,x1) x [y0,y1)`?
fn inside(shape: ShapeKind, x0: f64, y0: f64, x1: f64, y1: f64, px: f64, py: f64) -> bool {
    let (w, h) = (x1 - x0, y1 - y0);
    let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
    match shape {
        ShapeKind::Rectangle => px >= x0 && px < x1 && py >= y0 && py < y1,
        ShapeKind::Circle => {
            let dx = (px - cx) / (w / 2.0);
            let dy = (py - cy) / (h / 2.0);
            dx * dx + dy * dy <= 1.0
        }
        // apex up, base along the bottom edge
        ShapeKind::Triangle => convex_contains(&[(cx, y0), (x1, y1), (x0, y1)], px, py),
        // flat top and bottom, pointed left and right
        ShapeKind::Hexagon => {
            let q = w / 4.0;
            convex_contains(
                &[(x0 + q, y0), (x1 - q, y0), (x1, cy), (x1 - q, y1), (x0 + q, y1), (x0, cy)],
                px,
                py,
            )
        }
    }
}

/// Point-in-polygon for a clockwise (in image coordinates) convex polygon.
fn convex_contains(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    (0..poly.len()).all(|i| {
        let (ax, ay) = poly[i];
        let (bx, by) = poly[(i + 1) % poly.len()];
        (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
    })
}

/// Pixels `(y, x)` of `shape` inscribed in the half-open box, clipped to the image.
pub fn rasterize_shape(
    shape: ShapeKind,
    (x0, y0, x1, y1): (usize, usize, usize, usize),
    height: usize,
    width: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in y0..y1.min(height) {
        for x in x0..x1.min(width) {
            if inside(shape, x0 as f64, y0 as f64, x1 as f64, y1 as f64, x as f64 + 0.5, y as f64 + 0.5) {
                out.push((y, x));
            }
        }
    }
    out
}

/// Per-pixel labels rasterized from boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    pub labels: LabelMap,
    /// Always true for masks built here; kept so downstream code can tell
    /// pseudo labels from real per-pixel annotations.
    pub from_boxes: bool,
}

/// Inscribe each box's shape into it; later boxes overwrite earlier ones.
/// Pixels outside every shape hold `background`.
pub fn bbox_to_pseudo_mask(boxes: &[BBox], height: usize, width: usize, background: u32) -> PseudoMask {
    let mut labels = LabelMap::filled(height, width, background);
    for b in boxes {
        if b.is_degenerate() {
            log::warn!("skipping zero-area box {b:?}");
            continue;
        }
        for (y, x) in rasterize_shape(b.shape, (b.x0, b.y0, b.x1, b.y1), height, width) {
            labels.set(y, x, b.label);
        }
    }
    PseudoMask {
        labels,
        from_boxes: true,
    }
}

/// 8-connected components of a binary mask, each a sorted list of flat
/// pixel indices. Components are ordered by their first pixel.
pub fn separate_instances(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), height * width, "mask size");
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}
