//! Dense video tensors, voxel masks and their binary file formats.
//!
//! Layout is row-major `T → H → W → C` with 32-bit float elements. The
//! on-disk format ("STV1") is a 4-byte magic, four little-endian `u32` dims
//! and the raw little-endian payload. Masks use the same header under the
//! magic "STM0" with `C == 1` and one byte (0 or 1) per voxel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"STV1";
pub const MASK_MAGIC: &[u8; 4] = b"STM0";
pub const HEADER_LEN: usize = 20;

/// Spatio-temporal extent of a volume: frames, rows, columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub const fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn voxels(&self) -> usize {
        self.t * self.h * self.w
    }

    #[inline]
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.h + h) * self.w + w
    }

    /// Inverse of [`Dims3::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let w = idx % self.w;
        let rest = idx / self.w;
        (rest / self.h, rest % self.h, w)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}

impl std::fmt::Display for Dims3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.t, self.h, self.w)
    }
}

/// Dense `T×H×W×C` float volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    dims: Dims3,
    channels: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn zeros(dims: Dims3, channels: usize) -> Self {
        Self::filled(dims, &vec![0.0; channels])
    }

    /// Tensor whose every voxel holds `per_channel`.
    pub fn filled(dims: Dims3, per_channel: &[f32]) -> Self {
        let mut data = Vec::with_capacity(dims.voxels() * per_channel.len());
        for _ in 0..dims.voxels() {
            data.extend_from_slice(per_channel);
        }
        Self { dims, channels: per_channel.len(), data }
    }

    pub fn from_vec(dims: Dims3, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.voxels() == 0 {
            return Err(Error::invalid(format!("empty tensor dims {dims}x{channels}")));
        }
        if data.len() != dims.voxels() * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {}x{}",
                data.len(),
                dims,
                channels
            )));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Channel values of the voxel at linear voxel index `idx`.
    #[inline]
    pub fn voxel(&self, idx: usize) -> &[f32] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, idx: usize) -> &mut [f32] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        self.data[self.dims.index(t, h, w) * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// True when every value is finite and inside `[0, 1]`.
    pub fn is_valid_video(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += *v as f64;
            }
        }
        let n = self.dims.voxels() as f64;
        sums.iter().map(|s| s / n).collect()
    }

    /// Sub-volume `[t0,t1) × [h0,h1) × [w0,w1)`.
    pub fn crop(&self, bbox: &BBox) -> Result<Self> {
        if !bbox.fits(self.dims) || bbox.is_empty() {
            return Err(Error::invalid(format!("bbox {bbox:?} outside {}", self.dims)));
        }
        let out_dims = bbox.dims();
        let mut data = Vec::with_capacity(out_dims.voxels() * self.channels);
        for t in bbox.t0..bbox.t1 {
            for h in bbox.h0..bbox.h1 {
                let start = self.dims.index(t, h, bbox.w0) * self.channels;
                let end = self.dims.index(t, h, bbox.w1 - 1) * self.channels + self.channels;
                data.extend_from_slice(&self.data[start..end]);
            }
        }
        Ok(Self { dims: out_dims, channels: self.channels, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        write_header(&mut out, TENSOR_MAGIC, self.dims, self.channels);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, channels, count) = read_header(bytes, TENSOR_MAGIC, 4)?;
        let payload = &bytes[HEADER_LEN..];
        let data = payload
            .chunks_exact(4)
            .take(count)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { dims, channels, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Half-open spatio-temporal box `(t0,t1,h0,h1,w0,w1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub t0: usize,
    pub t1: usize,
    pub h0: usize,
    pub h1: usize,
    pub w0: usize,
    pub w1: usize,
}

impl BBox {
    pub fn full(dims: Dims3) -> Self {
        Self { t0: 0, t1: dims.t, h0: 0, h1: dims.h, w0: 0, w1: dims.w }
    }

    pub fn dims(&self) -> Dims3 {
        Dims3::new(self.t1 - self.t0, self.h1 - self.h0, self.w1 - self.w0)
    }

    pub fn is_empty(&self) -> bool {
        self.t1 <= self.t0 || self.h1 <= self.h0 || self.w1 <= self.w0
    }

    fn fits(&self, dims: Dims3) -> bool {
        self.t1 <= dims.t && self.h1 <= dims.h && self.w1 <= dims.w
    }

    pub fn contains(&self, t: usize, h: usize, w: usize) -> bool {
        (self.t0..self.t1).contains(&t) && (self.h0..self.h1).contains(&h) && (self.w0..self.w1).contains(&w)
    }
}

/// Boolean membership volume over `(T,H,W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelMask {
    dims: Dims3,
    data: Vec<bool>,
}

impl VoxelMask {
    pub fn new(dims: Dims3, value: bool) -> Self {
        Self { dims, data: vec![value; dims.voxels()] }
    }

    pub fn from_vec(dims: Dims3, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::invalid(format!("mask length {} does not match {dims}", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Mask with exactly the listed linear voxel indices set.
    pub fn from_indices(dims: Dims3, indices: &[u32]) -> Self {
        let mut mask = Self::new(dims, false);
        for &i in indices {
            mask.data[i as usize] = true;
        }
        mask
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize) -> bool {
        self.data[self.dims.index(t, h, w)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }

    /// Element-wise OR, in place.
    pub fn union_with(&mut self, other: &VoxelMask) -> Result<()> {
        if other.dims != self.dims {
            return Err(Error::invalid(format!("mask dims {} vs {}", self.dims, other.dims)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
        Ok(())
    }

    /// Intersection-over-union; two empty masks give 0.
    pub fn iou(&self, other: &VoxelMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            inter += (*a && *b) as usize;
            union += (*a || *b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn crop(&self, bbox: &BBox) -> Result<Self> {
        if !bbox.fits(self.dims) || bbox.is_empty() {
            return Err(Error::invalid(format!("bbox {bbox:?} outside {}", self.dims)));
        }
        let out_dims = bbox.dims();
        let mut data = Vec::with_capacity(out_dims.voxels());
        for t in bbox.t0..bbox.t1 {
            for h in bbox.h0..bbox.h1 {
                let start = self.dims.index(t, h, bbox.w0);
                data.extend_from_slice(&self.data[start..start + out_dims.w]);
            }
        }
        Ok(Self { dims: out_dims, data })
    }

    /// Nearest-neighbor resampling with corner-aligned sampling positions.
    pub fn resize_nearest(&self, new_dims: Dims3) -> Result<Self> {
        check_target(new_dims)?;
        let mt = nearest_map(self.dims.t, new_dims.t);
        let mh = nearest_map(self.dims.h, new_dims.h);
        let mw = nearest_map(self.dims.w, new_dims.w);
        let mut data = Vec::with_capacity(new_dims.voxels());
        for &st in &mt {
            for &sh in &mh {
                for &sw in &mw {
                    data.push(self.get(st, sh, sw));
                }
            }
        }
        Ok(Self { dims: new_dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        write_header(&mut out, MASK_MAGIC, self.dims, 1);
        out.extend(self.data.iter().map(|b| *b as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, channels, count) = read_header(bytes, MASK_MAGIC, 1)?;
        if channels != 1 {
            return Err(ParseError::Shape(format!("mask must have C == 1, found {channels}")).into());
        }
        let data = bytes[HEADER_LEN..HEADER_LEN + count]
            .iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(ParseError::Value(format!("mask byte {other}"))),
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], dims: Dims3, channels: usize) {
    out.extend_from_slice(magic);
    for d in [dims.t, dims.h, dims.w, channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// Validates magic and payload length; returns dims, channels and element count.
fn read_header(bytes: &[u8], magic: &[u8; 4], elem_size: usize) -> Result<(Dims3, usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(ParseError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found,
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(ParseError::Truncated { expected: HEADER_LEN, found: bytes.len() }.into());
    }
    let raw: Vec<u32> = bytes[4..HEADER_LEN]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let count = raw
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d as usize))
        .and_then(|n| n.checked_mul(elem_size).map(|bytes| (n, bytes)))
        .and_then(|(n, b)| b.checked_add(HEADER_LEN).map(|_| n))
        .ok_or_else(|| ParseError::DimOverflow(raw.clone()))?;
    if count == 0 {
        return Err(ParseError::Shape(format!("zero dimension in {raw:?}")).into());
    }
    let expected = HEADER_LEN + count * elem_size;
    if bytes.len() < expected {
        return Err(ParseError::Truncated { expected, found: bytes.len() }.into());
    }
    if bytes.len() > expected {
        return Err(ParseError::Shape(format!("{} trailing bytes", bytes.len() - expected)).into());
    }
    let dims = Dims3::new(raw[0] as usize, raw[1] as usize, raw[2] as usize);
    Ok((dims, raw[3] as usize, count))
}

fn check_target(new_dims: Dims3) -> Result<()> {
    if new_dims.t == 0 || new_dims.h == 0 || new_dims.w == 0 {
        return Err(Error::invalid(format!("target dims must be >= 1, got {new_dims}")));
    }
    Ok(())
}

/// Corner-aligned source coordinate of output sample `i` out of `dst`.
#[inline]
fn source_position(i: usize, src: usize, dst: usize) -> f64 {
    if dst == 1 {
        (src as f64 - 1.0) / 2.0
    } else {
        i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
    }
}

/// Per-axis linear interpolation taps: (lower index, upper index, upper weight).
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            let pos = source_position(i, src, dst);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

fn nearest_map(src: usize, dst: usize) -> Vec<usize> {
    (0..dst)
        .map(|i| (source_position(i, src, dst).round() as usize).min(src - 1))
        .collect()
}

/// Corner-aligned trilinear resampling over `(t,h,w)`, channels preserved.
pub fn resize_trilinear(t: &VideoTensor, new_dims: Dims3) -> Result<VideoTensor> {
    check_target(new_dims)?;
    if new_dims == t.dims {
        return Ok(t.clone());
    }
    let c = t.channels;
    let tt = linear_taps(t.dims.t, new_dims.t);
    let th = linear_taps(t.dims.h, new_dims.h);
    let tw = linear_taps(t.dims.w, new_dims.w);
    let mut out = Vec::with_capacity(new_dims.voxels() * c);
    let mut acc = vec![0.0f32; c];
    for &(t0, t1, ft) in &tt {
        for &(h0, h1, fh) in &th {
            for &(w0, w1, fw) in &tw {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (ti, wt) in [(t0, 1.0 - ft), (t1, ft)] {
                    if wt == 0.0 {
                        continue;
                    }
                    for (hi, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                        if wh == 0.0 {
                            continue;
                        }
                        for (wi, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                            if ww == 0.0 {
                                continue;
                            }
                            let weight = wt * wh * ww;
                            let px = t.voxel(t.dims.index(ti, hi, wi));
                            for (a, v) in acc.iter_mut().zip(px) {
                                *a += weight * v;
                            }
                        }
                    }
                }
                out.extend_from_slice(&acc);
            }
        }
    }
    // Clamp rounding overshoot so each channel stays inside its input range.
    let mut lo = vec![f32::INFINITY; c];
    let mut hi = vec![f32::NEG_INFINITY; c];
    for px in t.data.chunks_exact(c) {
        for k in 0..c {
            lo[k] = lo[k].min(px[k]);
            hi[k] = hi[k].max(px[k]);
        }
    }
    for px in out.chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = px[k].clamp(lo[k], hi[k]);
        }
    }
    VideoTensor::from_vec(new_dims, c, out)
}

/// `src` where `mask` is set, `base` elsewhere.
pub fn compose_masked(base: &VideoTensor, src: &VideoTensor, mask: &VoxelMask) -> Result<VideoTensor> {
    if base.dims != src.dims || base.dims != mask.dims {
        return Err(Error::invalid(format!(
            "dims mismatch: base {}, src {}, mask {}",
            base.dims, src.dims, mask.dims
        )));
    }
    if base.channels != src.channels {
        return Err(Error::invalid(format!(
            "channel mismatch: base {}, src {}",
            base.channels, src.channels
        )));
    }
    let mut out = base.clone();
    for (i, m) in mask.data.iter().enumerate() {
        if *m {
            out.voxel_mut(i).copy_from_slice(src.voxel(i));
        }
    }
    Ok(out)
}
