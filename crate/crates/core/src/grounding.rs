//! Box extraction from word attention maps.
//!
//! A decoder step attends over the patch grid; grounding turns that map into
//! one pixel-space box: normalize by the maximum, keep cells strictly above
//! a threshold, take the largest 4-connected region, and report its tight
//! bounding box scaled to pixels. All coordinates are inclusive, so a box
//! covering one pixel has width 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default attention threshold.
pub const DEFAULT_RHO: f32 = 0.05;

/// Axis-aligned box with inclusive corners, in pixel coordinates with the
/// origin at the top-left. `x` grows rightward, `y` downward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoundingBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Self {
        assert!(x1 <= x2 && y1 <= y2, "degenerate box ({x1},{y1})..({x2},{y2})");
        BoundingBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> usize {
        self.x2 - self.x1 + 1
    }

    pub fn height(&self) -> usize {
        self.y2 - self.y1 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// Intersection over union under the inclusive-corner convention. Two
/// identical boxes give 1; boxes that share no pixel give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    if ix1 > ix2 || iy1 > iy2 {
        return 0.0;
    }
    let inter = ((ix2 - ix1 + 1) * (iy2 - iy1 + 1)) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    inter / union
}

/// Divides by the maximum so the peak becomes exactly 1. A map whose maximum
/// is not strictly positive cannot be normalized.
pub fn normalize_max(map: &[f32]) -> Result<Vec<f32>> {
    let max = map.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        return Err(Error::DegenerateMap { max: max as f64 });
    }
    Ok(map.iter().map(|&v| v / max).collect())
}

/// Cells strictly above the threshold. The peak cell always survives since
/// normalization puts it at 1 and thresholds live well below 1.
pub fn threshold_mask(map: &[f32], rho: f32) -> Vec<bool> {
    map.iter().map(|&v| v > rho).collect()
}

/// Largest 4-connected region of set cells, as ascending row-major indices.
/// Ties go to the region containing the smallest index. Scanning in
/// row-major order visits each region first at its minimum index, so the
/// first region of maximal size wins ties.
pub fn largest_component(mask: &[bool], rows: usize, cols: usize) -> Result<Vec<usize>> {
    assert_eq!(mask.len(), rows * cols, "mask length vs grid");
    let mut visited = vec![false; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut component = Vec::new();
        visited[start] = true;
        queue.push(start);
        while let Some(i) = queue.pop() {
            component.push(i);
            let (r, c) = (i / cols, i % cols);
            let mut try_cell = |nr: usize, nc: usize| {
                let j = nr * cols + nc;
                if mask[j] && !visited[j] {
                    visited[j] = true;
                    queue.push(j);
                }
            };
            if r > 0 {
                try_cell(r - 1, c);
            }
            if r + 1 < rows {
                try_cell(r + 1, c);
            }
            if c > 0 {
                try_cell(r, c - 1);
            }
            if c + 1 < cols {
                try_cell(r, c + 1);
            }
        }
        if component.len() > best.len() {
            component.sort_unstable();
            best = component;
        }
    }
    if best.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(best)
}

/// Tight box around a set of row-major cell indices, in cell coordinates.
pub fn tight_box(cells: &[usize], cols: usize) -> Result<BoundingBox> {
    if cells.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for &i in cells {
        let (r, c) = (i / cols, i % cols);
        x1 = x1.min(c);
        y1 = y1.min(r);
        x2 = x2.max(c);
        y2 = y2.max(r);
    }
    Ok(BoundingBox::new(x1, y1, x2, y2))
}

/// Nearest-neighbor upsampling of a grid map by an integer factor.
pub fn upsample_nearest(map: &[f32], rows: usize, cols: usize, factor: usize) -> Vec<f32> {
    assert_eq!(map.len(), rows * cols, "map length vs grid");
    assert!(factor > 0, "zero upsampling factor");
    let (out_rows, out_cols) = (rows * factor, cols * factor);
    let mut out = vec![0.0; out_rows * out_cols];
    for r in 0..out_rows {
        for c in 0..out_cols {
            out[r * out_cols + c] = map[(r / factor) * cols + c / factor];
        }
    }
    out
}

/// Full pipeline from a patch-grid attention map to one pixel-space box.
///
/// Thresholding and component analysis happen on the patch grid; because
/// nearest-neighbor upsampling maps each cell to a solid block, this is
/// identical to running them on the upsampled pixel map, only cheaper. The
/// returned box is the component's tight box scaled to pixels.
pub fn extract_box(
    map: &[f32],
    rows: usize,
    cols: usize,
    patch: usize,
    rho: f32,
) -> Result<BoundingBox> {
    if map.len() != rows * cols {
        return Err(Error::BadGrid {
            len: map.len(),
            rows,
            cols,
        });
    }
    let normalized = normalize_max(map)?;
    let mask = threshold_mask(&normalized, rho);
    let component = largest_component(&mask, rows, cols)?;
    let cell_box = tight_box(&component, cols)?;
    Ok(BoundingBox::new(
        cell_box.x1 * patch,
        cell_box.y1 * patch,
        (cell_box.x2 + 1) * patch - 1,
        (cell_box.y2 + 1) * patch - 1,
    ))
}
