//! Concept overlays written as binary PPM frames.

use std::fs;
use std::path::{Path, PathBuf};

use stace_core::tensor::{VideoTensor, VoxelMask};

use crate::error::CliError;

const HIGHLIGHT: [f32; 3] = [1.0, 0.0, 0.0];

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB of one voxel; single-channel videos render as gray.
fn rgb(video: &VideoTensor, idx: usize) -> [f32; 3] {
    let v = video.voxel(idx);
    match v.len() {
        1 | 2 => [v[0]; 3],
        _ => [v[0], v[1], v[2]],
    }
}

/// Frame `t` as PPM bytes: masked voxels are blended half-and-half with pure
/// red, all others are dimmed to half intensity.
pub fn render_frame(video: &VideoTensor, mask: &VoxelMask, t: usize) -> Vec<u8> {
    let d = video.dims();
    let mut out = format!("P6\n{} {}\n255\n", d.w, d.h).into_bytes();
    for h in 0..d.h {
        for w in 0..d.w {
            let idx = d.index(t, h, w);
            let px = rgb(video, idx);
            for c in 0..3 {
                let v = if mask.data()[idx] { 0.5 * px[c] + 0.5 * HIGHLIGHT[c] } else { 0.5 * px[c] };
                out.push(to_byte(v));
            }
        }
    }
    out
}

/// Writes `frame_%04d.ppm` for every frame and returns the paths in order.
pub fn render_overlay(video: &VideoTensor, segments: &[&[u32]], out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let d = video.dims();
    let mut mask = VoxelMask::new(d, false);
    for seg in segments {
        for &i in *seg {
            let i = i as usize;
            if i >= d.voxels() {
                return Err(CliError::Precondition(format!("segment voxel {i} outside video {d}")));
            }
            mask.data_mut()[i] = true;
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    (0..d.t)
        .map(|t| {
            let path = out_dir.join(format!("frame_{t:04}.ppm"));
            fs::write(&path, render_frame(video, &mask, t)).map_err(|e| CliError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
