//! Two-layer affine/ReLU/affine networks with hand-written backprop and Adam.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::numerics::{softmax, RngStream};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DNW1";

/// `y = W2 · relu(W1 · x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet2 {
    /// hidden × in
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// out × hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept from a forward pass over a batch (one sample per row).
#[derive(Debug, Clone)]
pub struct BatchCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

pub const BLOCK_NAMES: [&str; 4] = ["w1", "b1", "w2", "b2"];

impl DenseNet2 {
    pub fn zeros(in_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        DenseNet2 {
            w1: Array2::zeros((hidden_dim, in_dim)),
            b1: Array1::zeros(hidden_dim),
            w2: Array2::zeros((out_dim, hidden_dim)),
            b2: Array1::zeros(out_dim),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if in_dim == 0 || hidden_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!(
                "network dims must be positive, got {in_dim}-{hidden_dim}-{out_dim}"
            )));
        }
        let mut net = Self::zeros(in_dim, hidden_dim, out_dim);
        let a1 = (6.0 / (in_dim + hidden_dim) as f64).sqrt();
        net.w1.iter_mut().for_each(|w| *w = rng.uniform(-a1, a1));
        let a2 = (6.0 / (hidden_dim + out_dim) as f64).sqrt();
        net.w2.iter_mut().for_each(|w| *w = rng.uniform(-a2, a2));
        Ok(net)
    }

    pub fn in_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, BatchCache)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let y = hidden.dot(&self.w2.t()) + &self.b2;
        Ok((
            y,
            BatchCache {
                x: x.to_owned(),
                pre,
                hidden,
            },
        ))
    }

    /// Backprop of `dy` (one row per sample). Parameter gradients are summed over rows.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        dy: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        if dy.ncols() != self.out_dim() || dy.nrows() != cache.x.nrows() {
            return Err(Error::DimMismatch {
                expected: self.out_dim(),
                got: dy.ncols(),
            });
        }
        let gw2 = dy.t().dot(&cache.hidden);
        let gb2 = dy.sum_axis(Axis(0));
        let mut dpre = dy.dot(&self.w2);
        Zip::from(&mut dpre).and(&cache.pre).for_each(|d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        let gw1 = dpre.t().dot(&cache.x);
        let gb1 = dpre.sum_axis(Axis(0));
        let dx = dpre.dot(&self.w1);
        Ok((
            Gradients {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
            dx,
        ))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, BatchCache)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let (y, cache) = self.forward_batch(xv)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    pub fn backward(&self, cache: &BatchCache, dy: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let dyv = ArrayView2::from_shape((1, dy.len()), dy).expect("row view");
        let (g, dx) = self.backward_batch(cache, dyv)?;
        Ok((g, dx.into_raw_vec_and_offset().0))
    }

    /// Forward without keeping activations.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                got: x.len(),
            });
        }
        let xv = ArrayView1::from(x);
        let h = (self.w1.dot(&xv) + &self.b1).mapv(|v| v.max(0.0));
        Ok((self.w2.dot(&h) + &self.b2).to_vec())
    }

    /// Forward over many rows at once; returns one output vector per input.
    pub fn apply_many<V: AsRef<[f64]>>(&self, xs: &[V]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let x = rows_to_array(xs, self.in_dim())?;
        let (y, _) = self.forward_batch(x.view())?;
        Ok(y.outer_iter().map(|r| r.to_vec()).collect())
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w1", self.w1.as_slice().expect("standard layout")),
            ("b1", self.b1.as_slice().expect("standard layout")),
            ("w2", self.w2.as_slice().expect("standard layout")),
            ("b2", self.b2.as_slice().expect("standard layout")),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("w1", self.w1.as_slice_mut().expect("standard layout")),
            ("b1", self.b1.as_slice_mut().expect("standard layout")),
            ("w2", self.w2.as_slice_mut().expect("standard layout")),
            ("b2", self.b2.as_slice_mut().expect("standard layout")),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn rows_to_array<V: AsRef<[f64]>>(xs: &[V], dim: usize) -> Result<Array2<f64>> {
    let mut flat = Vec::with_capacity(xs.len() * dim);
    for v in xs {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        flat.extend_from_slice(v);
    }
    Ok(Array2::from_shape_vec((xs.len(), dim), flat).expect("shape checked"))
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet2) -> Self {
        Gradients {
            w1: Array2::zeros(net.w1.raw_dim()),
            b1: Array1::zeros(net.b1.raw_dim()),
            w2: Array2::zeros(net.w2.raw_dim()),
            b2: Array1::zeros(net.b2.raw_dim()),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1 *= s;
        self.b1 *= s;
        self.w2 *= s;
        self.b2 *= s;
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn blocks(&self) -> [(&'static str, &[f64]); 4] {
        [
            ("w1", self.w1.as_slice().expect("standard layout")),
            ("b1", self.b1.as_slice().expect("standard layout")),
            ("w2", self.w2.as_slice().expect("standard layout")),
            ("b2", self.b2.as_slice().expect("standard layout")),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 4] {
        [
            ("w1", self.w1.as_slice_mut().expect("standard layout")),
            ("b1", self.b1.as_slice_mut().expect("standard layout")),
            ("w2", self.w2.as_slice_mut().expect("standard layout")),
            ("b2", self.b2.as_slice_mut().expect("standard layout")),
        ]
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|(_, b)| b.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &DenseNet2, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update. Rejects the whole step if any gradient is non-finite.
    pub fn step(&mut self, net: &mut DenseNet2, grads: &Gradients) -> Result<()> {
        for (name, block) in grads.blocks() {
            if block.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        if grads.w1.raw_dim() != net.w1.raw_dim() || grads.w2.raw_dim() != net.w2.raw_dim() {
            return Err(Error::DimMismatch {
                expected: net.n_params(),
                got: grads.w1.len() + grads.b1.len() + grads.w2.len() + grads.b2.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let params = net.blocks_mut();
        let ms = self.m.blocks_mut();
        let vs = self.v.blocks_mut();
        let gs = grads.blocks();
        for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(gs) {
            for i in 0..p.1.len() {
                let gi = g.1[i];
                m.1[i] = b1 * m.1[i] + (1.0 - b1) * gi;
                v.1[i] = b2 * v.1[i] + (1.0 - b2) * gi * gi;
                let mhat = m.1[i] / c1;
                let vhat = v.1[i] / c2;
                p.1[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Fixed,
    HalveEvery(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if let LrSchedule::HalveEvery(0) = self.schedule {
            return Err(Error::Config("halving period must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Fixed => self.lr,
            LrSchedule::HalveEvery(period) => self.lr * 0.5f64.powi((epoch / period) as i32),
        }
    }

    pub fn describe(&self) -> String {
        let sched = match self.schedule {
            LrSchedule::Fixed => "fixed".to_string(),
            LrSchedule::HalveEvery(p) => format!("halve-every-{p}"),
        };
        format!(
            "lr={} epochs={} batch={} schedule={} seed={}",
            self.lr, self.epochs, self.batch_size, sched, self.seed
        )
    }
}

/// Output-layer losses used by the trainers.
#[derive(Debug, Clone, Copy)]
pub enum Loss<'a> {
    /// ‖y − target‖², gradient 2(y − target).
    SqEuclideanToTarget(&'a [f64]),
    /// −log softmax(y)[label].
    CrossEntropy(usize),
}

pub fn loss_and_grad(y: &[f64], loss: Loss<'_>) -> Result<(f64, Vec<f64>)> {
    match loss {
        Loss::SqEuclideanToTarget(t) => {
            if t.len() != y.len() {
                return Err(Error::DimMismatch {
                    expected: y.len(),
                    got: t.len(),
                });
            }
            let diff: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
            let l = diff.iter().map(|d| d * d).sum();
            Ok((l, diff.into_iter().map(|d| 2.0 * d).collect()))
        }
        Loss::CrossEntropy(label) => {
            if label >= y.len() {
                return Err(Error::Config(format!(
                    "label {label} out of range for {} logits",
                    y.len()
                )));
            }
            let mut p = softmax(y)?;
            let l = -p[label].max(f64::MIN_POSITIVE).ln();
            p[label] -= 1.0;
            Ok((l, p))
        }
    }
}

/// Largest relative error between backprop and central differences over all parameters.
///
/// Relative error is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check(net: &DenseNet2, loss: Loss<'_>, x: &[f64]) -> Result<f64> {
    grad_check_with_step(net, loss, x, 1e-4)
}

pub fn grad_check_with_step(net: &DenseNet2, loss: Loss<'_>, x: &[f64], h: f64) -> Result<f64> {
    let (y, cache) = net.forward(x)?;
    let (_, dy) = loss_and_grad(&y, loss)?;
    let (analytic, _) = net.backward(&cache, &dy)?;

    let eval = |n: &DenseNet2| -> Result<f64> {
        let y = n.apply(x)?;
        Ok(loss_and_grad(&y, loss)?.0)
    };

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (block, (_, grads)) in analytic.blocks().iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe.blocks()[block].1[i];
            probe.blocks_mut()[block].1[i] = orig + h;
            let plus = eval(&probe)?;
            probe.blocks_mut()[block].1[i] = orig - h;
            let minus = eval(&probe)?;
            probe.blocks_mut()[block].1[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Network plus free-form metadata (shape, seed, training config).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DenseNet2,
    pub meta: BTreeMap<String, String>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

pub fn encode_checkpoint(net: &DenseNet2) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * net.n_params());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    for d in [net.in_dim(), net.hidden_dim(), net.out_dim()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (_, block) in net.blocks() {
        for &v in block {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DenseNet2> {
    if bytes.len() < 16 {
        return Err(Error::Checkpoint("header truncated".into()));
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: bytes[..4].try_into().unwrap(),
        });
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (i, h, o) = (dim(4), dim(8), dim(12));
    if i == 0 || h == 0 || o == 0 {
        return Err(Error::Checkpoint(format!(
            "zero dimension in shape {i}-{h}-{o}"
        )));
    }
    let mut net = DenseNet2::zeros(i, h, o);
    let expected = 16 + 4 * net.n_params();
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} bytes for shape {i}-{h}-{o}, found {}",
            bytes.len()
        )));
    }
    let mut values = bytes[16..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64);
    for (name, block) in net.blocks_mut() {
        for p in block.iter_mut() {
            let v = values.next().expect("length checked");
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!(
                    "non-finite value in block {name}"
                )));
            }
            *p = v;
        }
    }
    Ok(net)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(&ckpt.net)).map_err(|e| Error::io(path, e))?;
    let mut meta = ckpt.meta.clone();
    meta.insert(
        "shape".into(),
        format!(
            "{}-{}-{}",
            ckpt.net.in_dim(),
            ckpt.net.hidden_dim(),
            ckpt.net.out_dim()
        ),
    );
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mpath = meta_path(path);
    fs::write(&mpath, text).map_err(|e| Error::io(mpath, e))
}

/// Loads weights (rounded to f32 on save) and the metadata sidecar if present.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = decode_checkpoint(&bytes)?;
    let mut meta = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(meta_path(path)) {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }
    }
    Ok(Checkpoint { net, meta })
}
