//! Polygon annotations to training targets: area centroids, peak-normalized
//! Gaussian heatmaps, and rasterized ground-truth region masks.

use crate::error::{CoreError, Result};
use ndarray::Array2;

/// Peak-normalized Gaussian target over an H×W pixel grid.
///
/// The maximum over the grid is exactly 1 (at the pixel nearest the
/// centroid); values decay isotropically with distance from the centroid.
#[derive(Debug, Clone)]
pub struct TargetHeatmap {
    pub values: Array2<f64>,
    /// Real-valued centroid in pixel coordinates (cx, cy).
    pub centroid: (f64, f64),
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Polygon,
    Threshold,
}

/// Binary region on the pixel grid.
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub values: Array2<bool>,
    pub source: MaskSource,
    /// Set when the mask has no pixels (degenerate polygon, empty threshold).
    pub empty: bool,
}

impl RegionMask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Signed shoelace area (positive for counter-clockwise vertex order in a
/// y-down pixel coordinate system the sign is flipped; callers use |area|).
pub fn polygon_area(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

fn segments_properly_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = cross(a, b, c);
    let d2 = cross(a, b, d);
    let d3 = cross(c, d, a);
    let d4 = cross(c, d, b);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// True when a quadrilateral's opposite edges cross (bow-tie shape).
/// Collinear/degenerate layouts are not treated as self-intersections.
pub fn quad_self_intersects(pts: &[(f64, f64)]) -> bool {
    assert_eq!(pts.len(), 4, "quad check expects 4 points");
    segments_properly_intersect(pts[0], pts[1], pts[2], pts[3])
        || segments_properly_intersect(pts[1], pts[2], pts[3], pts[0])
}

const DEGENERATE_AREA: f64 = 1e-9;

/// True when the polygon has (numerically) zero area.
pub fn polygon_is_degenerate(pts: &[(f64, f64)]) -> bool {
    polygon_area(pts).abs() < DEGENERATE_AREA
}

/// Area centroid of a simple polygon; falls back to the vertex arithmetic
/// mean when the area vanishes (degenerate annotation).
pub fn polygon_centroid(pts: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pts.len() == 4 && quad_self_intersects(pts) {
        return Err(CoreError::validation("self-intersecting polygon"));
    }
    let area = polygon_area(pts);
    if area.abs() < DEGENERATE_AREA {
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
        return Ok((cx, cy));
    }
    let n = pts.len();
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        let w = x0 * y1 - x1 * y0;
        cx += (x0 + x1) * w;
        cy += (y0 + y1) * w;
    }
    Ok((cx / (6.0 * area), cy / (6.0 * area)))
}

/// Sigma tied to the annotated region scale: `scale` times the radius of
/// the circle with the polygon's area, floored at `min_sigma` so degenerate
/// polygons still yield a valid target.
pub fn sigma_for_polygon(pts: &[(f64, f64)], scale: f64, min_sigma: f64) -> f64 {
    let area = polygon_area(pts).abs();
    (scale * (area / std::f64::consts::PI).sqrt()).max(min_sigma)
}

/// Isotropic Gaussian centered at `centroid`, divided by its grid maximum
/// so the peak equals exactly 1.
pub fn gaussian_target(centroid: (f64, f64), sigma: f64, h: usize, w: usize) -> Result<TargetHeatmap> {
    if !(sigma > 0.0) {
        return Err(CoreError::config(format!(
            "gaussian target sigma must be positive, got {sigma}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(CoreError::config("gaussian target needs H, W >= 1"));
    }
    let (cx, cy) = centroid;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut values = Array2::zeros((h, w));
    let mut max = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let v = (-(dx * dx + dy * dy) * inv).exp();
            if v > max {
                max = v;
            }
            values[[y, x]] = v;
        }
    }
    values.mapv_inplace(|v| v / max);
    Ok(TargetHeatmap {
        values,
        centroid,
        sigma,
    })
}

/// Even-odd point-in-polygon test with boundary points included.
pub fn point_in_polygon(p: (f64, f64), pts: &[(f64, f64)]) -> bool {
    let n = pts.len();
    // boundary inclusion: on-segment check
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        if cross(a, b, p).abs() < 1e-9
            && p.0 >= a.0.min(b.0) - 1e-9
            && p.0 <= a.0.max(b.0) + 1e-9
            && p.1 >= a.1.min(b.1) - 1e-9
            && p.1 <= a.1.max(b.1) + 1e-9
        {
            return true;
        }
    }
    let mut inside = false;
    for i in 0..n {
        let (x0, y0) = pts[i];
        let (x1, y1) = pts[(i + 1) % n];
        if (y0 > p.1) != (y1 > p.1) {
            let xi = x0 + (p.1 - y0) / (y1 - y0) * (x1 - x0);
            if p.0 < xi {
                inside = !inside;
            }
        }
    }
    inside
}

/// Rasterize a simple polygon: a pixel is set iff its center lies inside
/// (boundary centers included). Degenerate polygons produce an
/// empty-flagged mask.
pub fn rasterize_polygon(pts: &[(f64, f64)], h: usize, w: usize) -> RegionMask {
    if polygon_is_degenerate(pts) {
        return RegionMask {
            values: Array2::from_elem((h, w), false),
            source: MaskSource::Polygon,
            empty: true,
        };
    }
    let mut values = Array2::from_elem((h, w), false);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if point_in_polygon((x as f64, y as f64), pts) {
                values[[y, x]] = true;
                any = true;
            }
        }
    }
    RegionMask {
        values,
        source: MaskSource::Polygon,
        empty: !any,
    }
}

/// Coordinate mean of a mask's set pixels.
pub fn mask_centroid(mask: &RegionMask) -> Result<(f64, f64)> {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0usize;
    for ((y, x), &set) in mask.values.indexed_iter() {
        if set {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::validation("mask is empty, no centroid"));
    }
    Ok((sx / n as f64, sy / n as f64))
}

/// Gaussian target centered at the coordinate mean of a mask's set pixels
/// (the conversion applied to baseline mask/polygon predictions).
pub fn mask_centroid_heatmap(
    mask: &RegionMask,
    sigma: f64,
    h: usize,
    w: usize,
) -> Result<TargetHeatmap> {
    let c = mask_centroid(mask)?;
    gaussian_target(c, sigma, h, w)
}
