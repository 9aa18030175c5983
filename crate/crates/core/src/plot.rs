//! Diagnostic figures: channel-count curves (SVG) and feature difference
//! heat maps (PNG).

use std::path::Path;

use image::{GrayImage, Luma};
use plotters::prelude::*;
use sdfa_autograd::Tensor;

use crate::error::{Result, SdfaError};

fn plot_err(e: impl std::fmt::Display) -> SdfaError {
    SdfaError::Data(format!("plotting failed: {e}"))
}

/// One stacked panel per series of `(step, channels_selected)` points.
pub fn channel_curves_svg(path: &Path, panels: &[(String, Vec<(u64, f64)>)], channels: usize) -> Result<()> {
    if panels.is_empty() || panels.iter().any(|(_, pts)| pts.is_empty()) {
        return Err(SdfaError::Data("every panel needs at least one point".into()));
    }
    let height = 320 * panels.len() as u32;
    let root = SVGBackend::new(path, (900, height)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let areas = root.split_evenly((panels.len(), 1));
    let max_step = panels
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&(s, _)| s))
        .max()
        .unwrap_or(1)
        .max(1);
    for (area, (label, points)) in areas.iter().zip(panels) {
        let mut chart = ChartBuilder::on(area)
            .caption(label, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0u64..max_step, 0f64..channels.max(1) as f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("step")
            .y_desc("channels selected")
            .draw()
            .map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(points.iter().copied(), &BLUE))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    Ok(())
}

/// `|z_aug - z|` per channel of a `(1, C, h, w)` pair, scaled so the largest
/// entry is 1. Returns `C` planes of `h * w` values.
pub fn difference_maps(z: &Tensor<f32>, z_aug: &Tensor<f32>) -> Result<Vec<Vec<f32>>> {
    if z.shape() != z_aug.shape() || z.rank() != 4 || z.shape()[0] != 1 {
        return Err(SdfaError::Shape(format!(
            "difference maps need matching (1, C, h, w) tensors, got {:?} and {:?}",
            z.shape(),
            z_aug.shape()
        )));
    }
    let diff: Vec<f32> = z.data().iter().zip(z_aug.data()).map(|(a, b)| (b - a).abs()).collect();
    let max = diff.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let hw = z.shape()[2] * z.shape()[3];
    Ok(diff.chunks(hw).map(|p| p.iter().map(|v| v * scale).collect()).collect())
}

/// Tiles `[0, 1]` planes into a near-square grayscale mosaic, each cell
/// upscaled by `zoom` with a one-pixel separator.
pub fn write_mosaic(path: &Path, planes: &[Vec<f32>], h: usize, w: usize, zoom: usize) -> Result<()> {
    if planes.is_empty() || planes.iter().any(|p| p.len() != h * w) {
        return Err(SdfaError::Shape("mosaic planes must be non-empty and h*w long".into()));
    }
    let cols = (planes.len() as f64).sqrt().ceil() as usize;
    let rows = planes.len().div_ceil(cols);
    let (cell_h, cell_w) = (h * zoom + 1, w * zoom + 1);
    let mut img = GrayImage::from_pixel((cols * cell_w) as u32, (rows * cell_h) as u32, Luma([64]));
    for (i, plane) in planes.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for y in 0..h * zoom {
            for x in 0..w * zoom {
                let v = plane[(y / zoom) * w + x / zoom].clamp(0.0, 1.0);
                let px = (c * cell_w + x) as u32;
                let py = (r * cell_h + y) as u32;
                img.put_pixel(px, py, Luma([(v * 255.0).round() as u8]));
            }
        }
    }
    img.save(path).map_err(|source| SdfaError::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn difference_maps_are_normalized() {
        let z = Tensor::from_vec(&[1, 2, 1, 2], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
        let za = Tensor::from_vec(&[1, 2, 1, 2], vec![0.5f32, 1.5, 2.0, 1.0]).unwrap();
        let m = difference_maps(&z, &za).unwrap();
        assert_eq!(m, vec![vec![0.25, 0.25], vec![0.0, 1.0]]);
        let same = difference_maps(&z, &z).unwrap();
        assert!(same.iter().flatten().all(|&v| v == 0.0));
        assert!(difference_maps(&z, &Tensor::zeros(&[1, 2, 2, 1])).is_err());
    }

    #[test]
    fn figures_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let svg = dir.path().join("c.svg");
        let pts: Vec<(u64, f64)> = (1..50).map(|s| (s, (s % 7) as f64)).collect();
        channel_curves_svg(&svg, &[("on".into(), pts.clone()), ("off".into(), pts)], 8).unwrap();
        assert!(std::fs::metadata(&svg).unwrap().len() > 0);
        let png = dir.path().join("m.png");
        write_mosaic(&png, &vec![vec![0.0, 1.0, 0.5, 0.25]; 5], 2, 2, 4).unwrap();
        let img = image::open(&png).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 9, 2 * 9));
        assert!(channel_curves_svg(&svg, &[], 8).is_err());
    }
}
