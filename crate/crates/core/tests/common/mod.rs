//! Reference implementations used as test oracles. Nothing here calls into
//! the code under test beyond reading its public file formats.

#![allow(dead_code)]

/// Fully-connected head (`fc1 → ReLU → fc2`) evaluated in f64, decoded
/// straight from STN1 model bytes.
pub struct HeadOracle {
    pub feat: usize,
    pub hidden: usize,
    pub classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

fn word(bytes: &[u8], pos: &mut usize) -> u32 {
    let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    v
}

impl HeadOracle {
    pub fn from_stn1(bytes: &[u8]) -> Self {
        assert_eq!(&bytes[..4], b"STN1");
        let mut pos = 4;
        for _ in 0..5 {
            word(bytes, &mut pos);
        }
        let n = word(bytes, &mut pos) as usize;
        let mut shapes = Vec::new();
        for _ in 0..n {
            let rank = word(bytes, &mut pos) as usize;
            shapes.push((0..rank).map(|_| word(bytes, &mut pos) as usize).collect::<Vec<_>>());
        }
        let mut params = Vec::new();
        for s in &shapes {
            let len: usize = s.iter().product();
            let raw = &bytes[pos..pos + 4 * len];
            pos += 4 * len;
            params.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect::<Vec<_>>());
        }
        assert_eq!(pos, bytes.len());
        let (hidden, feat) = (shapes[n - 4][0], shapes[n - 4][1]);
        let classes = shapes[n - 2][0];
        Self {
            feat,
            hidden,
            classes,
            w1: params[n - 4].clone(),
            b1: params[n - 3].clone(),
            w2: params[n - 2].clone(),
            b2: params[n - 1].clone(),
        }
    }

    pub fn hidden_pre(&self, gap: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|j| (0..self.feat).map(|i| self.w1[j * self.feat + i] * gap[i]).sum::<f64>() + self.b1[j])
            .collect()
    }

    pub fn logit_from_hidden(&self, hidden: &[f64], class: usize) -> f64 {
        (0..self.hidden).map(|j| self.w2[class * self.hidden + j] * hidden[j]).sum::<f64>() + self.b2[class]
    }

    pub fn logit_from_gap(&self, gap: &[f64], class: usize) -> f64 {
        let h: Vec<f64> = self.hidden_pre(gap).iter().map(|v| v.max(0.0)).collect();
        self.logit_from_hidden(&h, class)
    }

    /// Global average over `P × feat` block activations.
    pub fn gap_of(&self, block: &[f64]) -> Vec<f64> {
        let p = block.len() / self.feat;
        let mut out = vec![0.0; self.feat];
        for row in block.chunks_exact(self.feat) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= p as f64);
        out
    }

    /// Smallest distance of a hidden pre-activation to its ReLU kink,
    /// relative to how far one coordinate step of size `eps` can move it.
    pub fn kink_margin(&self, gap: &[f64], eps: f64) -> f64 {
        let pre = self.hidden_pre(gap);
        (0..self.hidden)
            .map(|j| {
                let reach = (0..self.feat).map(|i| self.w1[j * self.feat + i].abs()).fold(0.0, f64::max) * eps;
                pre[j].abs() / reach.max(1e-300)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut up = x.to_vec();
    up[i] += eps;
    let mut down = x.to_vec();
    down[i] -= eps;
    (f(&up) - f(&down)) / (2.0 * eps)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Optimal k-means objective by enumerating every assignment of points to
/// `k` non-empty clusters.
pub fn brute_force_kmeans(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    loop {
        let mut counts = vec![0usize; k];
        for a in &assign {
            counts[*a] += 1;
        }
        if counts.iter().all(|c| *c > 0) {
            let dim = points[0].len();
            let mut sums = vec![vec![0.0; dim]; k];
            for (p, a) in points.iter().zip(&assign) {
                for (s, v) in sums[*a].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let mut obj = 0.0;
            for (p, a) in points.iter().zip(&assign) {
                obj += p
                    .iter()
                    .zip(&sums[*a])
                    .map(|(v, s)| (v - s / counts[*a] as f64).powi(2))
                    .sum::<f64>();
            }
            best = best.min(obj);
        }
        let mut i = 0;
        while i < n {
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
        if i == n {
            return best;
        }
    }
}

/// Labels obtained by giving every voxel of a `t × h × w` grid to its nearest
/// center; ties go to the lowest center index.
pub fn nearest_center_labels(dims: [usize; 3], centers: &[[f64; 3]]) -> Vec<u32> {
    let mut out = Vec::with_capacity(dims.iter().product());
    for t in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let p = [t as f64, h as f64, w as f64];
                let d = |c: &[f64; 3]| (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
                let best = (0..centers.len())
                    .min_by(|&a, &b| d(&centers[a]).total_cmp(&d(&centers[b])).then(a.cmp(&b)))
                    .unwrap();
                out.push(best as u32);
            }
        }
    }
    out
}

/// Fraction of positive entries, counted with strict positivity.
pub fn positive_fraction(values: &[f64]) -> f64 {
    values.iter().filter(|v| **v > 0.0).count() as f64 / values.len() as f64
}
