//! Deterministic vector math shared by every other module.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// z-value for a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

pub fn sq_euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(sq_dist(a, b))
}

/// Unchecked squared distance for inner loops; callers guarantee equal lengths.
#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    sq_euclidean(a, b).map(f64::sqrt)
}

/// Max-subtracted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("softmax scores must be finite".into()));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn mean_vec<V: AsRef<[f64]>>(vs: &[V]) -> Result<Vec<f64>> {
    let first = vs.first().ok_or(Error::Empty("mean of zero vectors"))?;
    let dim = first.as_ref().len();
    let mut acc = vec![0.0; dim];
    for v in vs {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean and 95% half-width (1.96 * s / sqrt(n), sample standard deviation).
///
/// With a single observation the half-width is reported as 0.
pub fn ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("confidence interval over zero values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z95 * var.sqrt() / n.sqrt()))
}

/// Formats fractions as a percent pair, e.g. `59.28±0.20`.
pub fn format_pct(mean: f64, half_width: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * half_width)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream. `(seed, stream_id)` fixes the draw sequence on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream; depends only on this stream's identity, not its position.
    pub fn child(&self, id: u64) -> RngStream {
        let derived = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5eed)));
        RngStream::new(derived, id)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `amount` distinct indices from `0..n` via a partial Fisher-Yates pass.
    ///
    /// Prefix-stable: the first `k` indices of a draw of size `m >= k` equal a draw of size `k`
    /// from an identically seeded stream.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        assert!(amount <= n, "cannot sample {amount} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..amount {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(amount);
        pool
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Projection onto the top two principal components of the centered data.
///
/// Each axis is oriented so its first nonzero loading is positive.
pub fn pca2d<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<[f64; 2]>> {
    if vectors.len() < 2 {
        return Err(Error::Empty("pca2d needs at least two vectors"));
    }
    let n = vectors.len();
    let dim = vectors[0].as_ref().len();
    let mean = mean_vec(vectors)?;
    let mut centered = DMatrix::<f64>::zeros(n, dim);
    for (i, v) in vectors.iter().enumerate() {
        for (j, (x, m)) in v.as_ref().iter().zip(&mean).enumerate() {
            centered[(i, j)] = x - m;
        }
    }
    let scale = centered.amax();
    if scale == 0.0 {
        return Err(Error::Degenerate(
            "pca2d input has rank 0 (all vectors identical)".into(),
        ));
    }
    let cov = centered.transpose() * &centered;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    if eig.eigenvalues[order[0]] <= 1e-24 * scale * scale {
        return Err(Error::Degenerate(
            "pca2d input has rank 0 (all vectors identical)".into(),
        ));
    }

    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        if let Some(first) = axis.iter().find(|a| a.abs() > 1e-12) {
            if *first < 0.0 {
                axis.iter_mut().for_each(|a| *a = -*a);
            }
        }
        axes.push(axis);
    }
    if axes.len() < 2 {
        axes.push(vec![0.0; dim]);
    }

    Ok((0..n)
        .map(|i| {
            let row = centered.row(i);
            let proj = |axis: &[f64]| row.iter().zip(axis).map(|(x, a)| x * a).sum::<f64>();
            [proj(&axes[0]), proj(&axes[1])]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotTag {
    Sample,
    Prototype,
    Restored,
    Center,
}

impl fmt::Display for PlotTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlotTag::Sample => "sample",
            PlotTag::Prototype => "prototype",
            PlotTag::Restored => "restored",
            PlotTag::Center => "center",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub class_id: u32,
    pub tag: PlotTag,
}

pub fn format_plot_data(points: &[PlotPoint]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.class_id, p.tag));
    }
    out
}

pub fn write_plot_data(path: &Path, points: &[PlotPoint]) -> Result<()> {
    fs::write(path, format_plot_data(points)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::RngCore;

    #[test]
    fn sq_euclidean_basics() {
        assert_eq!(sq_euclidean(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(sq_euclidean(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(sq_euclidean(&[0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sq_euclidean_matches_naive_loop() {
        let mut rng = RngStream::new(11, 0);
        let a: Vec<f64> = (0..512).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..512).map(|_| rng.normal()).collect();
        let mut naive = 0.0f64;
        for i in 0..512 {
            naive += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert_relative_eq!(sq_euclidean(&a, &b).unwrap(), naive, max_relative = 1e-6);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[-1.0, -4.0]).unwrap();
        let e1 = (-1.0f64).exp();
        let e4 = (-4.0f64).exp();
        assert_relative_eq!(p[0], e1 / (e1 + e4), epsilon = 1e-12);
        assert_relative_eq!(p[0], 0.9526, epsilon = 1e-4);
        assert_relative_eq!(p[1], 0.0474, epsilon = 1e-4);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_relative_eq!(p[0], 1.0, epsilon = 1e-12);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn mean_vec_cases() {
        assert_eq!(mean_vec(&[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(
            mean_vec(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            mean_vec(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            vec![3.0, 4.0]
        );
        assert!(mean_vec::<Vec<f64>>(&[]).is_err());
    }

    #[test]
    fn ci95_cases() {
        assert_eq!(ci95(&[1.0; 10]).unwrap(), (1.0, 0.0));
        let (m, h) = ci95(&[0.0, 1.0]).unwrap();
        assert_eq!(m, 0.5);
        // s = sqrt(0.5); 1.96 * s / sqrt(2) = 0.98
        assert_relative_eq!(h, 0.98, epsilon = 1e-12);
        assert!(ci95(&[]).is_err());
        assert_eq!(format_pct(0.5928, 0.0020), "59.28±0.20");
    }

    #[test]
    fn rng_streams_reproduce() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = RngStream::new(42, 8);
        let mut a = RngStream::new(42, 7);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn sample_indices_is_prefix_stable() {
        let short = RngStream::new(3, 1).sample_indices(50, 10);
        let long = RngStream::new(3, 1).sample_indices(50, 30);
        assert_eq!(short[..], long[..10]);
        let mut sorted = long.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 30);
    }

    #[test]
    fn pca_preserves_planar_distances() {
        let mut rng = RngStream::new(5, 0);
        let dim = 512;
        let mut u: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        u.iter_mut().for_each(|x| *x /= nu);
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, a)| *x -= dot * a);
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        let offset: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let (a, b) = (rng.uniform(-5.0, 5.0), rng.uniform(-3.0, 3.0));
                (0..dim).map(|k| offset[k] + a * u[k] + b * v[k]).collect()
            })
            .collect();
        let proj = pca2d(&pts).unwrap();
        for i in 0..pts.len() {
            for j in 0..i {
                let orig = sq_euclidean(&pts[i], &pts[j]).unwrap().sqrt();
                let p =
                    ((proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2)).sqrt();
                assert_relative_eq!(orig, p, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn pca_two_points_symmetric() {
        let proj = pca2d(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]).unwrap();
        assert_relative_eq!(proj[0][0], -proj[1][0], epsilon = 1e-12);
        assert!(proj[0][1].abs() < 1e-9 && proj[1][1].abs() < 1e-9);
    }

    #[test]
    fn pca_rejects_duplicates() {
        let pts = vec![vec![1.0, 1.0]; 4];
        assert!(matches!(pca2d(&pts), Err(Error::Degenerate(_))));
        assert!(pca2d(&[vec![1.0]]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            scores in prop::collection::vec(-50.0f64..50.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&scores).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn sq_euclidean_symmetric(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..32)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assert_eq!(sq_euclidean(&a, &b).unwrap(), sq_euclidean(&b, &a).unwrap());
            prop_assert_eq!(sq_euclidean(&a, &a).unwrap(), 0.0);
            prop_assert_eq!(sq_euclidean(&a, &b).unwrap() == 0.0, a == b);
        }

        #[test]
        fn mean_vec_permutation_invariant(
            vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..12),
            seed in any::<u64>(),
        ) {
            let mut shuffled = vs.clone();
            RngStream::new(seed, 0).shuffle(&mut shuffled);
            let a = mean_vec(&vs).unwrap();
            let b = mean_vec(&shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn ci95_zero_iff_constant(vals in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0]), 2..30)) {
            let (_, h) = ci95(&vals).unwrap();
            let constant = vals.iter().all(|v| *v == vals[0]);
            prop_assert_eq!(h == 0.0, constant);
        }
    }
}
