//! Heatmap exports: 8-bit grayscale images, colormapped overlays over a
//! frame, and the raw little-endian grid format
//! (u32 height, u32 width, then row-major f32 values).

use crate::error::{CoreError, Result};
use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView3};
use std::io::{Read, Write};
use std::path::Path;

/// Grayscale export: value × 255, rounded.
pub fn save_heatmap_png(heatmap: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = heatmap.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for ((y, x), &v) in heatmap.indexed_iter() {
        let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel(x as u32, y as u32, image::Luma([g]));
    }
    img.save(path.as_ref())
        .map_err(|e| CoreError::validation(format!("write image: {e}")))?;
    Ok(())
}

/// Simple blue→cyan→yellow→red map for overlay rendering.
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let seg = |a: [f64; 3], b: [f64; 3], t: f64| -> [u8; 3] {
        [
            (a[0] + (b[0] - a[0]) * t).round() as u8,
            (a[1] + (b[1] - a[1]) * t).round() as u8,
            (a[2] + (b[2] - a[2]) * t).round() as u8,
        ]
    };
    if v < 1.0 / 3.0 {
        seg([20.0, 20.0, 160.0], [0.0, 200.0, 200.0], v * 3.0)
    } else if v < 2.0 / 3.0 {
        seg([0.0, 200.0, 200.0], [240.0, 220.0, 40.0], (v - 1.0 / 3.0) * 3.0)
    } else {
        seg([240.0, 220.0, 40.0], [220.0, 30.0, 30.0], (v - 2.0 / 3.0) * 3.0)
    }
}

/// Colormapped heatmap blended over the frame at fixed 0.5 alpha.
pub fn save_overlay_png(
    frame: &ArrayView3<u8>,
    heatmap: &Array2<f64>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (h, w) = heatmap.dim();
    if frame.shape() != [h, w, 3] {
        return Err(CoreError::validation(format!(
            "overlay frame {:?} does not match heatmap {}x{}",
            frame.shape(),
            h,
            w
        )));
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in heatmap.indexed_iter() {
        let c = colormap(v);
        let px = [
            ((frame[[y, x, 0]] as f64) * 0.5 + (c[0] as f64) * 0.5).round() as u8,
            ((frame[[y, x, 1]] as f64) * 0.5 + (c[1] as f64) * 0.5).round() as u8,
            ((frame[[y, x, 2]] as f64) * 0.5 + (c[2] as f64) * 0.5).round() as u8,
        ];
        img.put_pixel(x as u32, y as u32, Rgb(px));
    }
    img.save(path.as_ref())
        .map_err(|e| CoreError::validation(format!("write image: {e}")))?;
    Ok(())
}

/// Raw grid: u32 height, u32 width (little-endian), then row-major f32.
pub fn save_raw_grid(grid: &Array2<f32>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = grid.dim();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&(h as u32).to_le_bytes())?;
    out.write_all(&(w as u32).to_le_bytes())?;
    for &v in grid.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_raw_grid(path: impl AsRef<Path>) -> Result<Array2<f32>> {
    let path = path.as_ref();
    let fmt_err = |m: &str| CoreError::Format {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut buf = [0u8; 4];
    file.read_exact(&mut buf).map_err(|_| fmt_err("truncated header"))?;
    let h = u32::from_le_bytes(buf) as usize;
    file.read_exact(&mut buf).map_err(|_| fmt_err("truncated header"))?;
    let w = u32::from_le_bytes(buf) as usize;
    let mut data = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        file.read_exact(&mut buf).map_err(|_| fmt_err("truncated payload"))?;
        data.push(f32::from_le_bytes(buf));
    }
    Array2::from_shape_vec((h, w), data).map_err(|_| fmt_err("shape mismatch"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn raw_grid_round_trips_bit_exact() {
        let grid = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f32 * 0.1 - 1.0);
        let dir = std::env::temp_dir().join("afford_test_rawgrid");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("g.bin");
        save_raw_grid(&grid, &path).unwrap();
        let loaded = load_raw_grid(&path).unwrap();
        assert_eq!(loaded, grid);
    }

    #[test]
    fn grayscale_png_writes_and_reads_back() {
        let mut hm = Array2::zeros((8, 8));
        hm[[3, 4]] = 1.0;
        hm[[0, 0]] = 0.5;
        let dir = std::env::temp_dir().join("afford_test_png");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("h.png");
        save_heatmap_png(&hm, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.get_pixel(4, 3).0[0], 255);
        assert_eq!(img.get_pixel(0, 0).0[0], 128);
        assert_eq!(img.get_pixel(7, 7).0[0], 0);
    }

    #[test]
    fn overlay_requires_matching_geometry() {
        let hm = Array2::zeros((8, 8));
        let frame = Array3::<u8>::zeros((4, 4, 3));
        let dir = std::env::temp_dir().join("afford_test_overlay");
        std::fs::create_dir_all(&dir).unwrap();
        assert!(save_overlay_png(&frame.view(), &hm, dir.join("o.png")).is_err());
    }
}
