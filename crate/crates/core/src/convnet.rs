//! A small 3D ConvNet trained from scratch: feature extractor and gradient
//! provider for concept scoring.
//!
//! Architecture: three blocks of `conv3d(k=3, s=1, pad=1) → ReLU → maxpool(2³)`,
//! global average pooling (layer `gap`), a hidden fully-connected layer with
//! ReLU (layer `fc1`) and a linear classifier producing the logits.
//!
//! Convolutions run as im2col followed by a single-precision GEMM.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{LabeledDataset, Split};
use crate::error::{Error, ParseError, Result};
use crate::tensor::{resize_trilinear, Dims3, VideoTensor};

pub const MODEL_MAGIC: &[u8; 4] = b"STN1";

/// Layers whose activations can be queried, bottom to top.
pub const LAYERS: [&str; 5] = ["conv1", "conv2", "conv3", "gap", "fc1"];
pub const DEFAULT_LAYER: &str = "gap";

/// Contract any model must satisfy to be explained.
pub trait ModelBackend: Sync {
    fn num_classes(&self) -> usize;

    /// Expected input dims and channel count.
    fn input_shape(&self) -> (Dims3, usize);

    fn layer_names(&self) -> &[&'static str];

    /// Flattened activation length at `layer`; fixed for every input.
    fn activation_dim(&self, layer: &str) -> Result<usize>;

    fn predict(&self, video: &VideoTensor) -> Result<Prediction>;

    /// Post-nonlinearity activations at `layer`, flattened.
    fn activations(&self, video: &VideoTensor, layer: &str) -> Result<Vec<f32>>;

    /// Gradient of logit `class` with respect to the activations at `layer`.
    fn grad_logit_wrt_activations(&self, video: &VideoTensor, class: usize, layer: &str) -> Result<Vec<f32>>;

    /// Logits obtained by running the layers above `layer` on `activations`.
    fn logits_from_activations(&self, layer: &str, activations: &[f32]) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub class: usize,
}

impl Prediction {
    fn from_logits(logits: Vec<f32>) -> Self {
        let class = argmax(&logits);
        Self { logits, class }
    }

    pub fn probabilities(&self) -> Vec<f32> {
        softmax(&self.logits)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / sum) as f32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub input: Dims3,
    pub in_channels: usize,
    pub conv_channels: [usize; 3],
    pub hidden: usize,
    pub classes: usize,
}

impl NetConfig {
    pub fn new(classes: usize) -> Self {
        Self { input: Dims3::new(16, 32, 32), in_channels: 3, conv_channels: [8, 16, 32], hidden: 64, classes }
    }

    pub fn with_input(mut self, input: Dims3, in_channels: usize) -> Self {
        self.input = input;
        self.in_channels = in_channels;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.input.t < 8 || self.input.h < 8 || self.input.w < 8 {
            return Err(Error::invalid(format!("input dims {} must be at least 8 per axis", self.input)));
        }
        if self.classes < 2 || self.in_channels == 0 || self.hidden == 0 || self.conv_channels.contains(&0) {
            return Err(Error::invalid(format!("invalid network config {self:?}")));
        }
        Ok(())
    }

    /// Spatial dims at the input of block `i` (0-based); `i == 3` is the last pooled output.
    fn block_dims(&self, i: usize) -> Dims3 {
        let mut d = self.input;
        for _ in 0..i {
            d = Dims3::new(d.t / 2, d.h / 2, d.w / 2);
        }
        d
    }

    fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.conv_channels[i - 1]
        }
    }

    fn feature_width(&self) -> usize {
        self.conv_channels[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    /// `(27·cin) × cout`, row-major; row index is `((kt·3 + kh)·3 + kw)·cin + ci`.
    w: Vec<f32>,
    b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// `outputs × inputs`, row-major.
    w: Vec<f32>,
    b: Vec<f32>,
}

impl Dense {
    fn forward(&self, x: &[f32]) -> Vec<f32> {
        self.w
            .chunks_exact(self.inputs)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + b)
            .collect()
    }

    /// `Wᵀ · dy`.
    fn backward_input(&self, dy: &[f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.inputs];
        for (row, g) in self.w.chunks_exact(self.inputs).zip(dy) {
            if *g == 0.0 {
                continue;
            }
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        dx
    }
}

/// The built-in network. Immutable once trained; every query is a pure function.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinNet {
    config: NetConfig,
    convs: [Conv; 3],
    fc1: Dense,
    fc2: Dense,
}

/// Intermediate values kept for back-propagation.
struct Trace {
    /// im2col matrices per block.
    cols: Vec<Vec<f32>>,
    /// Conv outputs before ReLU per block, `P × cout`.
    pre: Vec<Vec<f32>>,
    /// Argmax source index per pooled output per block.
    argmax: Vec<Vec<u32>>,
    /// Pooled block outputs (layers conv1..conv3).
    blocks: Vec<Vec<f32>>,
    gap: Vec<f32>,
    fc1_pre: Vec<f32>,
    fc1: Vec<f32>,
    logits: Vec<f32>,
}

#[derive(Clone)]
struct Grads {
    convs: Vec<(Vec<f32>, Vec<f32>)>,
    fc1: (Vec<f32>, Vec<f32>),
    fc2: (Vec<f32>, Vec<f32>),
}

impl Grads {
    fn zeros_like(net: &BuiltinNet) -> Self {
        Self {
            convs: net.convs.iter().map(|c| (vec![0.0; c.w.len()], vec![0.0; c.b.len()])).collect(),
            fc1: (vec![0.0; net.fc1.w.len()], vec![0.0; net.fc1.b.len()]),
            fc2: (vec![0.0; net.fc2.w.len()], vec![0.0; net.fc2.b.len()]),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for (w, b) in self.convs.iter_mut() {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.fc1.0);
        out.push(&mut self.fc1.1);
        out.push(&mut self.fc2.0);
        out.push(&mut self.fc2.1);
        out
    }
}

fn layer_index(layer: &str) -> Result<usize> {
    LAYERS.iter().position(|l| *l == layer).ok_or_else(|| {
        Error::invalid(format!("unknown layer {layer:?}; valid layers: {}", LAYERS.join(", ")))
    })
}

fn im2col(x: &[f32], d: Dims3, cin: usize, col: &mut Vec<f32>) {
    let k = 27 * cin;
    col.clear();
    col.resize(d.voxels() * k, 0.0);
    let (t_n, h_n, w_n) = (d.t as isize, d.h as isize, d.w as isize);
    let mut p = 0;
    for t in 0..t_n {
        for h in 0..h_n {
            for w in 0..w_n {
                let row = &mut col[p * k..(p + 1) * k];
                let mut off = 0;
                for kt in -1..=1isize {
                    for kh in -1..=1isize {
                        for kw in -1..=1isize {
                            let (st, sh, sw) = (t + kt, h + kh, w + kw);
                            if st >= 0 && st < t_n && sh >= 0 && sh < h_n && sw >= 0 && sw < w_n {
                                let src = (((st * h_n + sh) * w_n + sw) as usize) * cin;
                                row[off..off + cin].copy_from_slice(&x[src..src + cin]);
                            }
                            off += cin;
                        }
                    }
                }
                p += 1;
            }
        }
    }
}

fn col2im(dcol: &[f32], d: Dims3, cin: usize) -> Vec<f32> {
    let k = 27 * cin;
    let mut dx = vec![0.0f32; d.voxels() * cin];
    let (t_n, h_n, w_n) = (d.t as isize, d.h as isize, d.w as isize);
    let mut p = 0;
    for t in 0..t_n {
        for h in 0..h_n {
            for w in 0..w_n {
                let row = &dcol[p * k..(p + 1) * k];
                let mut off = 0;
                for kt in -1..=1isize {
                    for kh in -1..=1isize {
                        for kw in -1..=1isize {
                            let (st, sh, sw) = (t + kt, h + kh, w + kw);
                            if st >= 0 && st < t_n && sh >= 0 && sh < h_n && sw >= 0 && sw < w_n {
                                let dst = (((st * h_n + sh) * w_n + sw) as usize) * cin;
                                for (a, g) in dx[dst..dst + cin].iter_mut().zip(&row[off..off + cin]) {
                                    *a += g;
                                }
                            }
                            off += cin;
                        }
                    }
                }
                p += 1;
            }
        }
    }
    dx
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`, strides given explicitly.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], rsa: isize, csa: isize, b: &[f32], rsb: isize, csb: isize, c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a` (m×k) and `b` (k×n), and
    // `c` holds at least m·n elements, checked by the callers' constructions.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn maxpool(x: &[f32], d: Dims3, c: usize) -> (Vec<f32>, Vec<u32>) {
    let od = Dims3::new(d.t / 2, d.h / 2, d.w / 2);
    let mut out = vec![f32::NEG_INFINITY; od.voxels() * c];
    let mut arg = vec![0u32; od.voxels() * c];
    for t in 0..od.t {
        for h in 0..od.h {
            for w in 0..od.w {
                let o = od.index(t, h, w) * c;
                for dt in 0..2 {
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let i = d.index(2 * t + dt, 2 * h + dh, 2 * w + dw) * c;
                            for ch in 0..c {
                                if x[i + ch] > out[o + ch] {
                                    out[o + ch] = x[i + ch];
                                    arg[o + ch] = (i + ch) as u32;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

impl BuiltinNet {
    /// Fresh network with seeded uniform fan-in initialization and zero biases.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |len: usize, fan_in: usize| -> Vec<f32> {
            let bound = (6.0 / fan_in as f32).sqrt();
            (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let convs: [Conv; 3] = std::array::from_fn(|i| {
            let cin = config.block_in_channels(i);
            let cout = config.conv_channels[i];
            Conv { cin, cout, w: uniform(27 * cin * cout, 27 * cin), b: vec![0.0; cout] }
        });
        let feat = config.feature_width();
        let fc1 = Dense {
            inputs: feat,
            outputs: config.hidden,
            w: uniform(config.hidden * feat, feat),
            b: vec![0.0; config.hidden],
        };
        let fc2 = Dense {
            inputs: config.hidden,
            outputs: config.classes,
            w: uniform(config.classes * config.hidden, config.hidden),
            b: vec![0.0; config.classes],
        };
        Ok(Self { config, convs, fc1, fc2 })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    fn check_input(&self, video: &VideoTensor) -> Result<()> {
        if video.dims() != self.config.input || video.channels() != self.config.in_channels {
            return Err(Error::invalid(format!(
                "video {}x{} does not match model input {}x{}",
                video.dims(),
                video.channels(),
                self.config.input,
                self.config.in_channels
            )));
        }
        Ok(())
    }

    fn params(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for c in &self.convs {
            out.push(&c.w);
            out.push(&c.b);
        }
        out.extend([&self.fc1.w[..], &self.fc1.b[..], &self.fc2.w[..], &self.fc2.b[..]]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        out.push(&mut self.fc1.w);
        out.push(&mut self.fc1.b);
        out.push(&mut self.fc2.w);
        out.push(&mut self.fc2.b);
        out
    }

    /// Shapes of the parameter tensors in storage order.
    fn param_shapes(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(vec![c.cout as u32, 3, 3, 3, c.cin as u32]);
            out.push(vec![c.cout as u32]);
        }
        for d in [&self.fc1, &self.fc2] {
            out.push(vec![d.outputs as u32, d.inputs as u32]);
            out.push(vec![d.outputs as u32]);
        }
        out
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn weights_checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for p in self.params() {
            for v in p {
                for byte in v.to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        hash
    }

    pub fn all_weights_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn block_forward(&self, i: usize, x: &[f32], col: &mut Vec<f32>) -> (Vec<f32>, Vec<f32>, Vec<u32>) {
        let conv = &self.convs[i];
        let d = self.config.block_dims(i);
        let p = d.voxels();
        im2col(x, d, conv.cin, col);
        let mut pre = vec![0.0f32; p * conv.cout];
        let k = 27 * conv.cin;
        gemm(p, k, conv.cout, col, k as isize, 1, &conv.w, conv.cout as isize, 1, &mut pre);
        for row in pre.chunks_exact_mut(conv.cout) {
            for (v, b) in row.iter_mut().zip(&conv.b) {
                *v += b;
            }
        }
        let relu: Vec<f32> = pre.iter().map(|v| v.max(0.0)).collect();
        let (pooled, arg) = maxpool(&relu, d, conv.cout);
        (pre, pooled, arg)
    }

    fn gap(&self, x: &[f32]) -> Vec<f32> {
        let c = self.config.feature_width();
        let p = self.config.block_dims(3).voxels();
        let mut out = vec![0.0f32; c];
        for row in x.chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= p as f32);
        out
    }

    fn head(&self, gap: &[f32]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let fc1_pre = self.fc1.forward(gap);
        let fc1: Vec<f32> = fc1_pre.iter().map(|v| v.max(0.0)).collect();
        let logits = self.fc2.forward(&fc1);
        (fc1_pre, fc1, logits)
    }

    /// Forward pass up to and including layer index `until`.
    fn trace(&self, video: &VideoTensor, until: usize, keep_cols: bool) -> Trace {
        let mut tr = Trace {
            cols: Vec::new(),
            pre: Vec::new(),
            argmax: Vec::new(),
            blocks: Vec::new(),
            gap: Vec::new(),
            fc1_pre: Vec::new(),
            fc1: Vec::new(),
            logits: Vec::new(),
        };
        let mut col = Vec::new();
        for i in 0..3 {
            let input = if i == 0 { video.data() } else { &tr.blocks[i - 1] };
            let (pre, pooled, arg) = self.block_forward(i, input, &mut col);
            if keep_cols {
                tr.cols.push(std::mem::take(&mut col));
            }
            tr.pre.push(pre);
            tr.argmax.push(arg);
            tr.blocks.push(pooled);
            if until == i {
                return tr;
            }
        }
        tr.gap = self.gap(&tr.blocks[2]);
        if until == 3 {
            return tr;
        }
        let (fc1_pre, fc1, logits) = self.head(&tr.gap);
        tr.fc1_pre = fc1_pre;
        tr.fc1 = fc1;
        tr.logits = logits;
        tr
    }

    /// Back-propagates `dlogits` from the top down to the output of layer
    /// `stop`, returning the gradient there. Parameter gradients are added to
    /// `grads` when given (requires a trace recorded with `keep_cols`).
    fn backward(&self, tr: &Trace, dlogits: &[f32], stop: usize, mut grads: Option<&mut Grads>) -> Vec<f32> {
        if let Some(g) = grads.as_deref_mut() {
            for (o, dy) in dlogits.iter().enumerate() {
                g.fc2.1[o] += dy;
                for (gw, x) in g.fc2.0[o * self.fc2.inputs..(o + 1) * self.fc2.inputs].iter_mut().zip(&tr.fc1) {
                    *gw += dy * x;
                }
            }
        }
        let dfc1_out = self.fc2.backward_input(dlogits);
        if stop == 4 {
            return dfc1_out;
        }
        let dfc1_pre: Vec<f32> =
            dfc1_out.iter().zip(&tr.fc1_pre).map(|(g, p)| if *p > 0.0 { *g } else { 0.0 }).collect();
        if let Some(g) = grads.as_deref_mut() {
            for (o, dy) in dfc1_pre.iter().enumerate() {
                g.fc1.1[o] += dy;
                for (gw, x) in g.fc1.0[o * self.fc1.inputs..(o + 1) * self.fc1.inputs].iter_mut().zip(&tr.gap) {
                    *gw += dy * x;
                }
            }
        }
        let dgap = self.fc1.backward_input(&dfc1_pre);
        if stop == 3 {
            return dgap;
        }
        let p3 = self.config.block_dims(3).voxels();
        let mut dblock: Vec<f32> = (0..p3).flat_map(|_| dgap.iter().map(|g| g / p3 as f32)).collect();
        for i in (0..3).rev() {
            if stop == i {
                return dblock;
            }
            let conv = &self.convs[i];
            let d = self.config.block_dims(i);
            let p = d.voxels();
            // Through maxpool and ReLU.
            let mut dpre = vec![0.0f32; p * conv.cout];
            for (g, src) in dblock.iter().zip(&tr.argmax[i]) {
                dpre[*src as usize] += g;
            }
            for (g, pre) in dpre.iter_mut().zip(&tr.pre[i]) {
                if *pre <= 0.0 {
                    *g = 0.0;
                }
            }
            let k = 27 * conv.cin;
            if let Some(g) = grads.as_deref_mut() {
                let col = &tr.cols[i];
                let mut dw = vec![0.0f32; k * conv.cout];
                gemm(k, p, conv.cout, col, 1, k as isize, &dpre, conv.cout as isize, 1, &mut dw);
                for (a, v) in g.convs[i].0.iter_mut().zip(&dw) {
                    *a += v;
                }
                for row in dpre.chunks_exact(conv.cout) {
                    for (a, v) in g.convs[i].1.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
            if i == 0 {
                break;
            }
            let mut dcol = vec![0.0f32; p * k];
            gemm(p, conv.cout, k, &dpre, conv.cout as isize, 1, &conv.w, 1, conv.cout as isize, &mut dcol);
            dblock = col2im(&dcol, d, conv.cin);
        }
        Vec::new()
    }

    /// Softmax cross-entropy loss of one sample; accumulates parameter gradients.
    fn loss_and_grads(&self, video: &VideoTensor, label: usize, grads: &mut Grads) -> f32 {
        let tr = self.trace(video, usize::MAX, true);
        let probs = softmax(&tr.logits);
        let loss = -(probs[label].max(1e-30) as f64).ln() as f32;
        let mut dlogits = probs;
        dlogits[label] -= 1.0;
        self.backward(&tr, &dlogits, usize::MAX, Some(grads));
        loss
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        let word = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        word(&mut out, self.config.classes as u32);
        let d = self.config.input;
        for v in [d.t, d.h, d.w, self.config.in_channels] {
            word(&mut out, v as u32);
        }
        let shapes = self.param_shapes();
        word(&mut out, shapes.len() as u32);
        for s in &shapes {
            word(&mut out, s.len() as u32);
            for v in s {
                word(&mut out, *v);
            }
        }
        for p in self.params() {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader { bytes, pos: 0 };
        let magic = reader.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(ParseError::BadMagic {
                expected: "STN1".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            }
            .into());
        }
        let classes = reader.u32()? as usize;
        let dims = Dims3::new(reader.u32()? as usize, reader.u32()? as usize, reader.u32()? as usize);
        let in_channels = reader.u32()? as usize;
        let n_params = reader.u32()? as usize;
        let mut shapes = Vec::new();
        for _ in 0..n_params.min(64) {
            let rank = reader.u32()? as usize;
            let mut s = Vec::new();
            for _ in 0..rank.min(8) {
                s.push(reader.u32()?);
            }
            shapes.push(s);
        }
        if shapes.len() != 10 || shapes.iter().any(|s| s.is_empty()) || shapes[0].len() != 5 || shapes[6].len() != 2 {
            return Err(ParseError::Shape(format!("unexpected parameter table {shapes:?}")).into());
        }
        let conv_channels = [shapes[0][0] as usize, shapes[2][0] as usize, shapes[4][0] as usize];
        let hidden = shapes[6][0] as usize;
        let config = NetConfig { input: dims, in_channels, conv_channels, hidden, classes };
        let mut net = BuiltinNet::init(config, 0).map_err(|e| ParseError::Shape(e.to_string()))?;
        if net.param_shapes() != shapes {
            return Err(ParseError::Shape(format!(
                "parameter table {shapes:?} does not match architecture {:?}",
                net.param_shapes()
            ))
            .into());
        }
        for p in net.params_mut() {
            let raw = reader.take(4 * p.len())?;
            for (dst, b) in p.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        if reader.pos != bytes.len() {
            return Err(ParseError::Shape(format!("{} trailing bytes", bytes.len() - reader.pos)).into());
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or(ParseError::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl ModelBackend for BuiltinNet {
    fn num_classes(&self) -> usize {
        self.config.classes
    }

    fn input_shape(&self) -> (Dims3, usize) {
        (self.config.input, self.config.in_channels)
    }

    fn layer_names(&self) -> &[&'static str] {
        &LAYERS
    }

    fn activation_dim(&self, layer: &str) -> Result<usize> {
        let i = layer_index(layer)?;
        Ok(match i {
            0..=2 => self.config.block_dims(i + 1).voxels() * self.config.conv_channels[i],
            3 => self.config.feature_width(),
            _ => self.config.hidden,
        })
    }

    fn predict(&self, video: &VideoTensor) -> Result<Prediction> {
        self.check_input(video)?;
        Ok(Prediction::from_logits(self.trace(video, usize::MAX, false).logits))
    }

    fn activations(&self, video: &VideoTensor, layer: &str) -> Result<Vec<f32>> {
        let i = layer_index(layer)?;
        self.check_input(video)?;
        let mut tr = self.trace(video, i, false);
        Ok(match i {
            0..=2 => tr.blocks.swap_remove(i),
            3 => tr.gap,
            _ => tr.fc1,
        })
    }

    fn grad_logit_wrt_activations(&self, video: &VideoTensor, class: usize, layer: &str) -> Result<Vec<f32>> {
        let i = layer_index(layer)?;
        if class >= self.config.classes {
            return Err(Error::invalid(format!("class {class} outside [0,{})", self.config.classes)));
        }
        self.check_input(video)?;
        let tr = self.trace(video, usize::MAX, false);
        let mut dlogits = vec![0.0f32; self.config.classes];
        dlogits[class] = 1.0;
        Ok(self.backward(&tr, &dlogits, i, None))
    }

    fn logits_from_activations(&self, layer: &str, activations: &[f32]) -> Result<Vec<f32>> {
        let i = layer_index(layer)?;
        let expected = self.activation_dim(layer)?;
        if activations.len() != expected {
            return Err(Error::invalid(format!(
                "activation length {} does not match layer {layer} ({expected})",
                activations.len()
            )));
        }
        if i == 4 {
            return Ok(self.fc2.forward(activations));
        }
        let gap = if i == 3 {
            activations.to_vec()
        } else {
            let mut x = activations.to_vec();
            let mut col = Vec::new();
            for b in i + 1..3 {
                x = self.block_forward(b, &x, &mut col).1;
            }
            self.gap(&x)
        };
        Ok(self.head(&gap).2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
    pub momentum: f32,
    /// Batch gradients with a larger global L2 norm are rescaled to this norm.
    pub clip_norm: f32,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.01, batch: 8, seed: 0, momentum: 0.9, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f32>,
}

/// Resizes a video to the model's input dims when needed.
pub fn to_model_input(video: &VideoTensor, input: Dims3) -> Result<VideoTensor> {
    resize_trilinear(video, input)
}

/// Mini-batch SGD with momentum on softmax cross-entropy.
///
/// Single-threaded and deterministic: the same dataset, config and params
/// produce bit-identical weights.
pub fn train_model(dataset: &LabeledDataset, config: NetConfig, params: &TrainParams) -> Result<(BuiltinNet, TrainingLog)> {
    if !(params.lr > 0.0 && params.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be > 0, got {}", params.lr)));
    }
    if params.clip_norm.is_nan() || params.clip_norm <= 0.0 {
        return Err(Error::invalid(format!("clip_norm must be > 0, got {}", params.clip_norm)));
    }
    if params.batch == 0 || params.epochs == 0 {
        return Err(Error::invalid("batch and epochs must be >= 1"));
    }
    if dataset.n_classes != config.classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes, model expects {}",
            dataset.n_classes, config.classes
        )));
    }
    let train: Vec<(VideoTensor, usize)> = dataset
        .split(Split::Train)
        .map(|(_, item)| Ok((to_model_input(&item.video, config.input)?, item.label)))
        .collect::<Result<_>>()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut net = BuiltinNet::init(config, params.seed)?;
    net.check_input(&train[0].0)?;
    let mut velocity = Grads::zeros_like(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog { epoch_loss: Vec::with_capacity(params.epochs) };
    let mut step = 0usize;
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for batch in order.chunks(params.batch) {
            let mut grads = Grads::zeros_like(&net);
            let mut batch_loss = 0.0f32;
            for &i in batch {
                batch_loss += net.loss_and_grads(&train[i].0, train[i].1, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: batch_loss });
            }
            total += batch_loss as f64;
            let mean_norm = grads.slices_mut().iter().flat_map(|g| g.iter()).map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt()
                / batch.len() as f64;
            let mut scale = 1.0 / batch.len() as f32;
            if mean_norm > params.clip_norm as f64 {
                scale *= (params.clip_norm as f64 / mean_norm) as f32;
            }
            for ((p, g), v) in net.params_mut().into_iter().zip(grads.slices_mut()).zip(velocity.slices_mut()) {
                for ((w, g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                    *v = params.momentum * *v + g * scale;
                    *w -= params.lr * *v;
                }
            }
            if !net.all_weights_finite() {
                return Err(Error::TrainingDiverged { step, loss: batch_loss });
            }
            step += 1;
        }
        let mean = (total / train.len() as f64) as f32;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok((net, log))
}
