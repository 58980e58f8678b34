//! PNG rendering: grayscale occupancy frames and HSV-coded flow frames
//! (hue = direction, value = magnitude normalized per frame).

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{ArrayView2, ArrayView3, Axis};

use crate::error::{HgError, Result};
use crate::graph::Arr;

/// Grayscale image of one occupancy grid; values clamp to [0,1].
pub fn occupancy_image(grid: ArrayView2<f32>) -> GrayImage {
    let (h, w) = (grid.nrows(), grid.ncols());
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = grid[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

fn hsv_to_rgb(hue: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = (hue / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// One flow frame `[H, W, 2]` as an HSV image: hue encodes the direction
/// angle, value the magnitude relative to the frame maximum, saturation
/// is fixed at 1. Zero flow renders black.
pub fn flow_image(flow: ArrayView3<f32>) -> RgbImage {
    assert_eq!(flow.shape()[2], 2, "flow frame must be [H, W, 2]");
    let (h, w) = (flow.shape()[0], flow.shape()[1]);
    let mut max_mag = 0f32;
    for r in 0..h {
        for c in 0..w {
            max_mag = max_mag.max(flow[[r, c, 0]].hypot(flow[[r, c, 1]]));
        }
    }
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (fx, fy) = (flow[[y as usize, x as usize, 0]], flow[[y as usize, x as usize, 1]]);
        let mag = fx.hypot(fy);
        if max_mag == 0.0 || mag == 0.0 {
            return Rgb([0, 0, 0]);
        }
        let mut ang = fy.atan2(fx);
        if ang < 0.0 {
            ang += std::f32::consts::TAU;
        }
        Rgb(hsv_to_rgb(ang.to_degrees(), 1.0, mag / max_mag))
    })
}

fn save_err(file: &Path, e: image::ImageError) -> HgError {
    HgError::Format { file: file.to_path_buf(), detail: e.to_string() }
}

/// Writes `{prefix}_flow_{t}.png`, `{prefix}_observed_{t}.png` and
/// `{prefix}_occluded_{t}.png` for every future step, returning the paths.
/// Expects `flow [T,H,W,2]` and `[T,H,W]` occupancy grids.
pub fn render_bundle(
    dir: &Path,
    prefix: &str,
    flow: &Arr,
    observed: &Arr,
    occluded: &Arr,
) -> Result<Vec<PathBuf>> {
    let t_len = observed.shape()[0];
    if flow.ndim() != 4
        || flow.shape()[3] != 2
        || flow.shape()[..3] != observed.shape()[..]
        || observed.shape() != occluded.shape()
    {
        return Err(HgError::Contract(format!(
            "render shapes disagree: flow {:?}, observed {:?}, occluded {:?}",
            flow.shape(),
            observed.shape(),
            occluded.shape()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(3 * t_len);
    for t in 0..t_len {
        let fpath = dir.join(format!("{prefix}_flow_{t}.png"));
        let frame = flow.index_axis(Axis(0), t).into_dimensionality().unwrap();
        flow_image(frame).save(&fpath).map_err(|e| save_err(&fpath, e))?;
        written.push(fpath);
        for (name, grid) in [("observed", observed), ("occluded", occluded)] {
            let path = dir.join(format!("{prefix}_{name}_{t}.png"));
            let frame = grid.index_axis(Axis(0), t).into_dimensionality().unwrap();
            occupancy_image(frame).save(&path).map_err(|e| save_err(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
