//! Evaluation metrics and the pre-action evaluation protocol.
//!
//! Logits-conditioned: soft Dice on heatmap intensities. Boundary-
//! conditioned: PCK against the annotation centroid, plus Hausdorff and
//! average symmetric surface distance between boundary pixel sets.
//! Surface distances are computed with an exact two-pass squared
//! Euclidean distance transform sampled at boundary pixels.

use crate::data_model::{Manifest, Split};
use crate::error::{CoreError, Result};
use crate::framestore::FrameStore;
use crate::heatmap::{
    gaussian_target, polygon_centroid, rasterize_polygon, sigma_for_polygon, MaskSource,
    RegionMask,
};
use crate::model::Model;
use ndarray::Array2;
use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::path::Path;

/// Soft Dice `2·Σ(p·t) / (Σp + Σt)` on real-valued grids. Two empty grids
/// score 1 by convention (callers flag that case).
pub fn soft_dice(pred: &Array2<f64>, target: &Array2<f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim(), "soft_dice shape mismatch");
    let inter: f64 = pred.iter().zip(target.iter()).map(|(p, t)| p * t).sum();
    let mass: f64 = pred.sum() + target.sum();
    if mass <= 0.0 {
        return 1.0;
    }
    2.0 * inter / mass
}

/// Argmax pixel, first by row-major order on ties: returns (x, y).
pub fn heatmap_argmax(heatmap: &Array2<f64>) -> (usize, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut best_xy = (0usize, 0usize);
    for ((y, x), &v) in heatmap.indexed_iter() {
        if v > best {
            best = v;
            best_xy = (x, y);
        }
    }
    best_xy
}

/// PCK at `alpha`: 1 iff the heatmap argmax lies within
/// `alpha * sqrt(H² + W²)` of the ground-truth point.
pub fn pck_at(
    pred_heatmap: &Array2<f64>,
    gt_centroid: (f64, f64),
    alpha: f64,
    h: usize,
    w: usize,
) -> bool {
    assert!(alpha > 0.0, "pck alpha must be positive");
    let (ax, ay) = heatmap_argmax(pred_heatmap);
    let dx = ax as f64 - gt_centroid.0;
    let dy = ay as f64 - gt_centroid.1;
    let dist = (dx * dx + dy * dy).sqrt();
    dist <= alpha * ((h * h + w * w) as f64).sqrt()
}

/// Threshold a heatmap at `tau * max`, keep the largest 4-connected
/// component and count the discarded secondary activations.
pub fn heatmap_to_region(heatmap: &Array2<f64>, tau: f64) -> Result<(RegionMask, usize)> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(CoreError::config(format!("tau must be in (0,1), got {tau}")));
    }
    let max = heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(CoreError::validation(
            "heatmap has no positive activation to threshold",
        ));
    }
    let thr = tau * max;
    let (h, w) = heatmap.dim();
    let mut mask = Array2::from_elem((h, w), false);
    for ((y, x), &v) in heatmap.indexed_iter() {
        if v >= thr {
            mask[[y, x]] = true;
        }
    }
    let mut labels: Array2<i32> = Array2::from_elem((h, w), -1);
    let mut sizes: Vec<usize> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] || labels[[y, x]] >= 0 {
                continue;
            }
            let id = sizes.len() as i32;
            let mut size = 0usize;
            let mut queue = VecDeque::new();
            queue.push_back((y, x));
            labels[[y, x]] = id;
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                let mut push = |ny: usize, nx: usize, labels: &mut Array2<i32>| {
                    if mask[[ny, nx]] && labels[[ny, nx]] < 0 {
                        labels[[ny, nx]] = id;
                        queue.push_back((ny, nx));
                    }
                };
                if cy > 0 {
                    push(cy - 1, cx, &mut labels);
                }
                if cy + 1 < h {
                    push(cy + 1, cx, &mut labels);
                }
                if cx > 0 {
                    push(cy, cx - 1, &mut labels);
                }
                if cx + 1 < w {
                    push(cy, cx + 1, &mut labels);
                }
            }
            sizes.push(size);
        }
    }
    let keep = sizes
        .iter()
        .enumerate()
        .max_by_key(|(i, &s)| (s, usize::MAX - i))
        .map(|(i, _)| i as i32)
        .expect("at least one component above threshold");
    let secondary = sizes.len() - 1;
    let mut values = Array2::from_elem((h, w), false);
    for ((y, x), &l) in labels.indexed_iter() {
        if l == keep {
            values[[y, x]] = true;
        }
    }
    Ok((
        RegionMask {
            values,
            source: MaskSource::Threshold,
            empty: false,
        },
        secondary,
    ))
}

/// All components above threshold (the mode that exposes secondary
/// low-confidence activations to the boundary metrics).
pub fn heatmap_to_region_all(heatmap: &Array2<f64>, tau: f64) -> Result<RegionMask> {
    let (mut region, _) = heatmap_to_region(heatmap, tau)?;
    let max = heatmap.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let thr = tau * max;
    for ((y, x), &v) in heatmap.indexed_iter() {
        if v >= thr {
            region.values[[y, x]] = true;
        }
    }
    Ok(region)
}

/// Boundary pixels: set pixels with at least one unset 4-neighbor or on
/// the frame edge.
pub fn boundary_pixels(mask: &Array2<bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let on_edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let open = on_edge
                || !mask[[y - 1, x]]
                || !mask[[y + 1, x]]
                || !mask[[y, x - 1]]
                || !mask[[y, x + 1]];
            if open {
                out.push((y, x));
            }
        }
    }
    out
}

const EDT_INF: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of
/// parabolas).
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -EDT_INF;
    z[1] = EDT_INF;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = EDT_INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        out[q] = d * d + f[p];
    }
}

/// Exact squared Euclidean distance from every grid cell to the nearest
/// seed cell.
fn edt_squared(h: usize, w: usize, seeds: &[(usize, usize)]) -> Array2<f64> {
    let mut grid = Array2::from_elem((h, w), EDT_INF);
    for &(y, x) in seeds {
        grid[[y, x]] = 0.0;
    }
    // columns then rows
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = grid[[y, x]];
        }
        dt_1d(&col_in, &mut col_out);
        for y in 0..h {
            grid[[y, x]] = col_out[y];
        }
    }
    let mut row_in = vec![0.0f64; w];
    let mut row_out = vec![0.0f64; w];
    for y in 0..h {
        for x in 0..w {
            row_in[x] = grid[[y, x]];
        }
        dt_1d(&row_in, &mut row_out);
        for x in 0..w {
            grid[[y, x]] = row_out[x];
        }
    }
    grid
}

fn boundary_sets(a: &RegionMask, b: &RegionMask) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    if a.values.dim() != b.values.dim() {
        return Err(CoreError::validation("mask dimension mismatch"));
    }
    let ba = boundary_pixels(&a.values);
    let bb = boundary_pixels(&b.values);
    if ba.is_empty() || bb.is_empty() {
        return Err(CoreError::validation(
            "boundary metric on an empty mask (flagged per clip)",
        ));
    }
    Ok((ba, bb))
}

/// Hausdorff distance in pixels between boundary pixel sets.
pub fn hausdorff_px(a: &RegionMask, b: &RegionMask) -> Result<f64> {
    let (ba, bb) = boundary_sets(a, b)?;
    let (h, w) = a.values.dim();
    let to_b = edt_squared(h, w, &bb);
    let to_a = edt_squared(h, w, &ba);
    let d_ab = ba
        .iter()
        .map(|&(y, x)| to_b[[y, x]])
        .fold(0.0f64, f64::max);
    let d_ba = bb
        .iter()
        .map(|&(y, x)| to_a[[y, x]])
        .fold(0.0f64, f64::max);
    Ok(d_ab.max(d_ba).sqrt())
}

/// Average symmetric surface distance in pixels between boundary sets.
pub fn assd_px(a: &RegionMask, b: &RegionMask) -> Result<f64> {
    let (ba, bb) = boundary_sets(a, b)?;
    let (h, w) = a.values.dim();
    let to_b = edt_squared(h, w, &bb);
    let to_a = edt_squared(h, w, &ba);
    let sum_ab: f64 = ba.iter().map(|&(y, x)| to_b[[y, x]].sqrt()).sum();
    let sum_ba: f64 = bb.iter().map(|&(y, x)| to_a[[y, x]].sqrt()).sum();
    Ok((sum_ab + sum_ba) / (ba.len() + bb.len()) as f64)
}

/// The eight evaluation frames: evenly spaced over the earlier half of the
/// pre-action range `[t_start, t_start + (t_end - t_start)/2]`, duplicates
/// collapsed.
pub fn eval_frame_indices(t_start: usize, t_end: usize) -> Vec<usize> {
    assert!(t_start <= t_end);
    let hi = t_start + (t_end - t_start) / 2;
    if hi == t_start {
        return vec![t_start];
    }
    let span = (hi - t_start) as f64;
    let mut out: Vec<usize> = (0..8)
        .map(|k| t_start + (k as f64 * span / 7.0).round() as usize)
        .collect();
    out.dedup();
    out
}

/// One evaluated (clip, frame) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub clip_id: String,
    pub frame: usize,
    pub dice: f64,
    pub pck005: f64,
    pub pck01: f64,
    pub hd_px: Option<f64>,
    pub assd_px: Option<f64>,
}

/// Aggregate means; boundary metrics average over rows where they are
/// defined.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAggregate {
    pub rows: usize,
    pub dice: f64,
    pub pck005: f64,
    pub pck01: f64,
    pub hd_px: f64,
    pub assd_px: f64,
    pub boundary_rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregate: MetricsAggregate,
    /// (clip, frame) pairs whose boundary metrics could not be computed.
    pub skipped_boundary: usize,
    /// Clips with degenerate (zero-area) annotation polygons.
    pub degenerate_targets: usize,
    /// Total secondary threshold components discarded across rows.
    pub secondary_activations: usize,
}

pub fn aggregate_rows(rows: &[MetricsRow]) -> MetricsAggregate {
    let n = rows.len();
    let mean = |f: &dyn Fn(&MetricsRow) -> f64| -> f64 {
        if n == 0 {
            f64::NAN
        } else {
            rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd_px).collect();
    let assd: Vec<f64> = rows.iter().filter_map(|r| r.assd_px).collect();
    let opt_mean = |v: &[f64]| -> f64 {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    MetricsAggregate {
        rows: n,
        dice: mean(&|r| r.dice),
        pck005: mean(&|r| r.pck005),
        pck01: mean(&|r| r.pck01),
        hd_px: opt_mean(&hd),
        assd_px: opt_mean(&assd),
        boundary_rows: hd.len(),
    }
}

impl MetricsReport {
    pub fn from_rows(
        rows: Vec<MetricsRow>,
        skipped_boundary: usize,
        degenerate_targets: usize,
        secondary_activations: usize,
    ) -> Self {
        let aggregate = aggregate_rows(&rows);
        MetricsReport {
            rows,
            aggregate,
            skipped_boundary,
            degenerate_targets,
            secondary_activations,
        }
    }

    /// Tab-separated rows plus a `#`-prefixed aggregate footer.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "clip_id\tframe\tdice\tpck005\tpck01\thd_px\tassd_px")?;
        let fmt_opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x}"));
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.clip_id,
                r.frame,
                r.dice,
                r.pck005,
                r.pck01,
                fmt_opt(r.hd_px),
                fmt_opt(r.assd_px)
            )?;
        }
        let a = &self.aggregate;
        writeln!(
            out,
            "#aggregate\trows={}\tdice={}\tpck005={}\tpck01={}\thd_px={}\tassd_px={}\tboundary_rows={}",
            a.rows, a.dice, a.pck005, a.pck01, a.hd_px, a.assd_px, a.boundary_rows
        )?;
        writeln!(
            out,
            "#counts\tskipped_boundary={}\tdegenerate_targets={}\tsecondary_activations={}",
            self.skipped_boundary, self.degenerate_targets, self.secondary_activations
        )?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)?;
        let mut rows = Vec::new();
        let mut stored: Option<MetricsAggregate> = None;
        let mut skipped = 0usize;
        let mut degenerate = 0usize;
        let mut secondary = 0usize;
        let parse_err = |line: usize, message: String| CoreError::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#aggregate\t") {
                let mut kv = std::collections::HashMap::new();
                for part in rest.split('\t') {
                    let (k, v) = part
                        .split_once('=')
                        .ok_or_else(|| parse_err(i + 1, format!("bad field `{part}`")))?;
                    kv.insert(k.to_string(), v.to_string());
                }
                let get = |k: &str| -> Result<f64> {
                    kv.get(k)
                        .ok_or_else(|| parse_err(i + 1, format!("missing `{k}`")))?
                        .parse::<f64>()
                        .map_err(|e| parse_err(i + 1, e.to_string()))
                };
                stored = Some(MetricsAggregate {
                    rows: get("rows")? as usize,
                    dice: get("dice")?,
                    pck005: get("pck005")?,
                    pck01: get("pck01")?,
                    hd_px: get("hd_px")?,
                    assd_px: get("assd_px")?,
                    boundary_rows: get("boundary_rows")? as usize,
                });
                continue;
            }
            if let Some(rest) = line.strip_prefix("#counts\t") {
                for part in rest.split('\t') {
                    if let Some((k, v)) = part.split_once('=') {
                        let v: usize = v.parse().map_err(|_| {
                            parse_err(i + 1, format!("bad count `{part}`"))
                        })?;
                        match k {
                            "skipped_boundary" => skipped = v,
                            "degenerate_targets" => degenerate = v,
                            "secondary_activations" => secondary = v,
                            _ => {}
                        }
                    }
                }
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 7 {
                return Err(parse_err(i + 1, format!("expected 7 fields, got {}", parts.len())));
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                let v: f64 = s.parse().map_err(|e: std::num::ParseFloatError| {
                    parse_err(i + 1, e.to_string())
                })?;
                Ok(if v.is_nan() { None } else { Some(v) })
            };
            rows.push(MetricsRow {
                clip_id: parts[0].to_string(),
                frame: parts[1]
                    .parse()
                    .map_err(|_| parse_err(i + 1, "bad frame".to_string()))?,
                dice: parts[2]
                    .parse()
                    .map_err(|_| parse_err(i + 1, "bad dice".to_string()))?,
                pck005: parts[3]
                    .parse()
                    .map_err(|_| parse_err(i + 1, "bad pck005".to_string()))?,
                pck01: parts[4]
                    .parse()
                    .map_err(|_| parse_err(i + 1, "bad pck01".to_string()))?,
                hd_px: opt(parts[5])?,
                assd_px: opt(parts[6])?,
            });
        }
        let aggregate =
            stored.ok_or_else(|| parse_err(0, "missing #aggregate footer".to_string()))?;
        Ok(MetricsReport {
            rows,
            aggregate,
            skipped_boundary: skipped,
            degenerate_targets: degenerate,
            secondary_activations: secondary,
        })
    }

    /// Human-readable table in the standard column order.
    pub fn table(&self, label: &str) -> String {
        let a = &self.aggregate;
        let mut s = String::new();
        s.push_str("model\tDICE\tPCK@0.05\tPCK@0.1\tHD(px)\tASSD(px)\n");
        s.push_str(&format!(
            "{label}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{:.3}\n",
            a.dice, a.pck005, a.pck01, a.hd_px, a.assd_px
        ));
        s
    }
}

/// Evaluation knobs; defaults follow the documented conventions.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Relative threshold for heatmap-to-region conversion.
    pub tau: f64,
    /// Keep all threshold components instead of the largest one.
    pub all_components: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            tau: 0.5,
            all_components: false,
        }
    }
}

/// Evaluate a split: eight early pre-action frames per clip, all metrics
/// against the Gaussian target and the rasterized annotation polygon.
pub fn evaluate_split(
    model: &Model<f32>,
    manifest: &Manifest,
    split: Split,
    store: &FrameStore,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let records = manifest.split_records(split);
    if records.is_empty() {
        return Err(CoreError::validation(format!("split {split} is empty")));
    }
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    let mut degenerate = 0usize;
    let mut secondary_total = 0usize;
    for record in records {
        let pts = record.keypoint_pairs();
        let centroid = polygon_centroid(&pts)
            .map_err(|e| CoreError::validation(format!("clip {}: {e}", record.clip_id)))?;
        if record.degenerate() {
            degenerate += 1;
        }
        let sigma = sigma_for_polygon(&pts, model.cfg.sigma_scale, model.cfg.sigma_min);
        let target = gaussian_target(centroid, sigma, record.frame_height, record.frame_width)?;
        let gt_mask = rasterize_polygon(&pts, record.frame_height, record.frame_width);
        let clip = store.load_clip(record)?;
        let triplet = crate::conditioning::PromptTriplet::new(
            record.surgery.clone(),
            record.tool.clone(),
            record.action.clone(),
        );
        for t0 in eval_frame_indices(record.pre_action_start, record.pre_action_end) {
            let window = crate::encoder::build_clip_window::<f32>(
                &clip,
                t0,
                model.cfg.window_n,
                model.cfg.stride,
            )?;
            let heatmap32 = model.predict(&window, &triplet)?;
            let heatmap = heatmap32.mapv(|v| v as f64);
            let dice = soft_dice(&heatmap, &target.values);
            let pck005 = pck_at(&heatmap, centroid, 0.05, record.frame_height, record.frame_width);
            let pck01 = pck_at(&heatmap, centroid, 0.1, record.frame_height, record.frame_width);
            let (hd, assd) = match region_for(&heatmap, opts) {
                Ok((region, secondary)) => {
                    secondary_total += secondary;
                    if gt_mask.empty {
                        skipped += 1;
                        (None, None)
                    } else {
                        match (hausdorff_px(&region, &gt_mask), assd_px(&region, &gt_mask)) {
                            (Ok(h), Ok(a)) => (Some(h), Some(a)),
                            _ => {
                                skipped += 1;
                                (None, None)
                            }
                        }
                    }
                }
                Err(_) => {
                    skipped += 1;
                    (None, None)
                }
            };
            rows.push(MetricsRow {
                clip_id: record.clip_id.clone(),
                frame: t0,
                dice,
                pck005: if pck005 { 1.0 } else { 0.0 },
                pck01: if pck01 { 1.0 } else { 0.0 },
                hd_px: hd,
                assd_px: assd,
            });
        }
    }
    Ok(MetricsReport::from_rows(
        rows,
        skipped,
        degenerate,
        secondary_total,
    ))
}

fn region_for(heatmap: &Array2<f64>, opts: &EvalOptions) -> Result<(RegionMask, usize)> {
    if opts.all_components {
        Ok((heatmap_to_region_all(heatmap, opts.tau)?, 0))
    } else {
        heatmap_to_region(heatmap, opts.tau)
    }
}
