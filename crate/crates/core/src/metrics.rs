//! Layout evaluation: floor-plan and prism IoU, corner and pixel error,
//! depth RMSE and δ1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    boundary_edges_from_latitudes, boundary_latitudes, depth_to_polygon, latitude_to_row, polygon_area, LayoutTarget,
};
use crate::model::PredictionTensor;

/// Raster resolution used by [`iou2d`] and [`iou3d`].
pub const IOU_GRID: usize = 1024;
/// Polygons smaller than this (m²) count as degenerate.
pub const MIN_AREA: f64 = 1e-6;
/// Width in columns of the corner non-maximum suppression window.
pub const NMS_WINDOW: usize = 5;
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Pixel counts of a rasterised polygon pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RasterOverlap {
    pub inter: usize,
    pub a: usize,
    pub b: usize,
    pub cell_area: f64,
}

impl RasterOverlap {
    pub fn iou(&self) -> f64 {
        let union = self.a + self.b - self.inter;
        if union == 0 {
            0.0
        } else {
            self.inter as f64 / union as f64
        }
    }
}

/// Sorted even-odd crossing intervals of a horizontal line with a polygon.
fn row_spans(poly: &[[f64; 2]], y: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = poly.len();
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        if (p[1] <= y) != (q[1] <= y) {
            out.push(p[0] + (y - p[1]) / (q[1] - p[1]) * (q[0] - p[0]));
        }
    }
    out.sort_by(f64::total_cmp);
}

/// Number of cell centres `x0 + (j + 0.5)·dx`, `j ∈ [0, n)`, inside `[a, b)`.
fn cells_in(a: f64, b: f64, x0: f64, dx: f64, n: usize) -> usize {
    let idx = |x: f64| (((x - x0) / dx - 0.5).ceil().max(0.0) as usize).min(n);
    idx(b).saturating_sub(idx(a))
}

/// Rasterises two polygons at cell centres on a `grid × grid` lattice over
/// their joint bounding box expanded by 5%.
pub fn raster_overlap(a: &[[f64; 2]], b: &[[f64; 2]], grid: usize) -> RasterOverlap {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in a.iter().chain(b) {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..2 {
        let pad = 0.025 * (hi[k] - lo[k]);
        lo[k] -= pad;
        hi[k] += pad;
    }
    let (dx, dy) = ((hi[0] - lo[0]) / grid as f64, (hi[1] - lo[1]) / grid as f64);
    let (mut sa, mut sb) = (Vec::new(), Vec::new());
    let (mut na, mut nb, mut ni) = (0, 0, 0);
    for r in 0..grid {
        let y = lo[1] + (r as f64 + 0.5) * dy;
        row_spans(a, y, &mut sa);
        row_spans(b, y, &mut sb);
        for s in sa.chunks_exact(2) {
            na += cells_in(s[0], s[1], lo[0], dx, grid);
        }
        for s in sb.chunks_exact(2) {
            nb += cells_in(s[0], s[1], lo[0], dx, grid);
        }
        let (mut i, mut j) = (0, 0);
        while i + 1 < sa.len() && j + 1 < sb.len() {
            let (l, h) = (sa[i].max(sb[j]), sa[i + 1].min(sb[j + 1]));
            if l < h {
                ni += cells_in(l, h, lo[0], dx, grid);
            }
            if sa[i + 1] < sb[j + 1] {
                i += 2;
            } else {
                j += 2;
            }
        }
    }
    RasterOverlap {
        inter: ni,
        a: na,
        b: nb,
        cell_area: dx * dy,
    }
}

fn degenerate(pa: &[[f64; 2]], pb: &[[f64; 2]]) -> bool {
    let bad = polygon_area(pa).abs() < MIN_AREA || polygon_area(pb).abs() < MIN_AREA;
    if bad {
        log::warn!("degenerate floor plan in IoU");
    }
    bad
}

/// Floor-plan IoU of two horizon-depth vectors.
pub fn iou2d(pred_depth: &[f64], gt_depth: &[f64]) -> f64 {
    let (pa, pb) = (depth_to_polygon(pred_depth), depth_to_polygon(gt_depth));
    if degenerate(&pa, &pb) {
        return 0.0;
    }
    raster_overlap(&pa, &pb, IOU_GRID).iou()
}

/// IoU of the two room prisms standing on the shared floor plane.
pub fn iou3d(pred_depth: &[f64], pred_height: f64, gt_depth: &[f64], gt_height: f64) -> f64 {
    let (pa, pb) = (depth_to_polygon(pred_depth), depth_to_polygon(gt_depth));
    if degenerate(&pa, &pb) {
        return 0.0;
    }
    let o = raster_overlap(&pa, &pb, IOU_GRID);
    let inter = o.inter as f64 * pred_height.min(gt_height);
    let union = o.a as f64 * pred_height + o.b as f64 * gt_height - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[inline]
fn circular_dist(a: usize, b: usize, w: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(w - d)
}

/// Greedy top-`k` peak picking with circular suppression of `±window/2`
/// columns around each pick.
pub fn pick_peaks(score: &[f64], k: usize, window: usize) -> Vec<usize> {
    let w = score.len();
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = Vec::with_capacity(k);
    for u in order {
        if picked.len() == k {
            break;
        }
        if picked.iter().all(|&p| circular_dist(p, u, w) > window / 2) {
            picked.push(u);
        }
    }
    picked
}

/// Mean distance between matched image corner points divided by the image
/// diagonal, in percent. Points are matched greedily by distance; ground
/// truth points left unmatched cost one diagonal each.
pub fn corner_error(pred: &PredictionTensor, gt: &LayoutTarget, height: usize, width: usize) -> Result<f64> {
    if gt.corner_cols.is_empty() {
        return Err(Error::invalid("ground truth has no corners"));
    }
    if pred.width() != width || gt.width() != width {
        return Err(Error::Shape(format!(
            "corner error expects width {width}, got {} and {}",
            pred.width(),
            gt.width()
        )));
    }
    let diag = ((height * height + width * width) as f64).sqrt();
    let depth = pred.depth();
    let (pf, pc) = boundary_latitudes(&depth, gt.camera_height, pred.height());
    let points = |cols: &[usize], lf: &[f64], lc: &[f64]| -> Vec<[f64; 2]> {
        cols.iter()
            .flat_map(|&u| {
                let x = u as f64 + 0.5;
                [[x, latitude_to_row(lc[u], height)], [x, latitude_to_row(lf[u], height)]]
            })
            .collect()
    };
    let gt_pts = points(&gt.corner_cols, &gt.lat_floor, &gt.lat_ceil);
    let peaks = pick_peaks(&pred.corner_score(), gt.corner_cols.len(), NMS_WINDOW);
    let pred_pts = points(&peaks, &pf, &pc);
    let mut pairs = Vec::with_capacity(gt_pts.len() * pred_pts.len());
    for (i, g) in gt_pts.iter().enumerate() {
        for (j, p) in pred_pts.iter().enumerate() {
            let dx = (g[0] - p[0]).abs();
            let dx = dx.min(width as f64 - dx);
            pairs.push((dx.hypot(g[1] - p[1]), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut gt_used, mut pred_used) = (vec![false; gt_pts.len()], vec![false; pred_pts.len()]);
    let mut total = 0.0;
    for (d, i, j) in pairs {
        if !gt_used[i] && !pred_used[j] {
            gt_used[i] = true;
            pred_used[j] = true;
            total += d.min(diag);
        }
    }
    total += gt_used.iter().filter(|&&u| !u).count() as f64 * diag;
    Ok(100.0 * total / gt_pts.len() as f64 / diag)
}

/// Percentage of pixels whose ceiling/wall/floor label differs between the
/// prediction and the ground truth.
pub fn pixel_error(pred: &PredictionTensor, gt: &LayoutTarget, height: usize, width: usize) -> Result<f64> {
    if pred.width() != width || gt.width() != width {
        return Err(Error::Shape(format!(
            "pixel error expects width {width}, got {} and {}",
            pred.width(),
            gt.width()
        )));
    }
    let (pf, pc) = boundary_latitudes(&pred.depth(), gt.camera_height, pred.height());
    let p = boundary_edges_from_latitudes(&pf, &pc, height);
    let g = boundary_edges_from_latitudes(&gt.lat_floor, &gt.lat_ceil, height);
    Ok(100.0 * pixel_disagreement(&p, &g) as f64 / (height * width) as f64)
}

// Ceiling rows are [0, c), floor rows [f, H) and c ≤ f, so labels differ
// exactly between the two ceiling edges and between the two floor edges.
fn pixel_disagreement(p: &crate::geometry::BoundaryEdges, g: &crate::geometry::BoundaryEdges) -> usize {
    p.ceiling
        .iter()
        .zip(&g.ceiling)
        .chain(p.floor.iter().zip(&g.floor))
        .map(|(a, b)| a.abs_diff(*b))
        .sum()
}

/// Depth RMSE in metres and the fraction of columns whose depth ratio is
/// strictly below 1.25.
pub fn rmse_delta1(pred_depth: &[f64], gt_depth: &[f64]) -> (f64, f64) {
    let n = pred_depth.len() as f64;
    let mut se = 0.0;
    let mut hits = 0usize;
    for (&p, &g) in pred_depth.iter().zip(gt_depth) {
        se += (p - g) * (p - g);
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    ((se / n).sqrt(), hits as f64 / n)
}

/// Metrics of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub iou2d: f64,
    pub iou3d: f64,
    pub corner_error_pct: f64,
    pub pixel_error_pct: f64,
    pub rmse: f64,
    pub delta1: f64,
}

pub fn evaluate_prediction(pred: &PredictionTensor, gt: &LayoutTarget, height: usize) -> Result<SampleMetrics> {
    let width = gt.width();
    let depth = pred.depth();
    let (rmse, delta1) = rmse_delta1(&depth, &gt.depth);
    Ok(SampleMetrics {
        iou2d: iou2d(&depth, &gt.depth),
        iou3d: iou3d(&depth, pred.height(), &gt.depth, gt.height),
        corner_error_pct: corner_error(pred, gt, height, width)?,
        pixel_error_pct: pixel_error(pred, gt, height, width)?,
        rmse,
        delta1,
    })
}

/// Per-split means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou2d: f64,
    pub iou3d: f64,
    pub corner_error_pct: f64,
    pub pixel_error_pct: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub n_samples: usize,
}

impl MetricsReport {
    pub fn mean(samples: &[SampleMetrics]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self::default();
        }
        let avg = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n as f64;
        Self {
            iou2d: avg(|s| s.iou2d),
            iou3d: avg(|s| s.iou3d),
            corner_error_pct: avg(|s| s.corner_error_pct),
            pixel_error_pct: avg(|s| s.pixel_error_pct),
            rmse: avg(|s| s.rmse),
            delta1: avg(|s| s.delta1),
            n_samples: n,
        }
    }

    /// Model-selection order: higher 3D IoU first, lower RMSE on ties.
    pub fn better_than(&self, other: &MetricsReport) -> bool {
        self.iou3d > other.iou3d || (self.iou3d == other.iou3d && self.rmse < other.rmse)
    }
}
