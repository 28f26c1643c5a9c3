//! Self-training refinement: grow each support set with its γ nearest unlabeled vectors.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{mean_vec, sq_dist};
use crate::protocore::{Prototype, PrototypeSource};

pub const DEFAULT_GAMMA: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Every other query of the episode; recomputed per classified query.
    LeaveOneOutQuery,
    /// A separate unlabeled sample supplied with the episode.
    External,
    /// All queries including the current one. Faster approximation, never used for reported runs.
    SharedQuery,
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolMode::LeaveOneOutQuery => "leave-one-out",
            PoolMode::External => "external",
            PoolMode::SharedQuery => "shared",
        })
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave-one-out" | "loo" => Ok(PoolMode::LeaveOneOutQuery),
            "external" => Ok(PoolMode::External),
            "shared" => Ok(PoolMode::SharedQuery),
            other => Err(Error::Config(format!("unknown pool mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnlabeledPool<'a> {
    pub vectors: Vec<&'a [f64]>,
    pub mode: PoolMode,
}

impl UnlabeledPool<'_> {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn build_pool<'a>(
    mode: PoolMode,
    queries: &[&'a [f64]],
    current: Option<usize>,
    external: Option<&[&'a [f64]]>,
    gamma: usize,
) -> Result<UnlabeledPool<'a>> {
    let vectors: Vec<&'a [f64]> = match mode {
        PoolMode::LeaveOneOutQuery => {
            let cur = current.ok_or_else(|| {
                Error::Config("leave-one-out pool needs the index of the current query".into())
            })?;
            if cur >= queries.len() {
                return Err(Error::Config(format!(
                    "current query {cur} out of range for {} queries",
                    queries.len()
                )));
            }
            queries
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != cur)
                .map(|(_, v)| *v)
                .collect()
        }
        PoolMode::SharedQuery => queries.to_vec(),
        PoolMode::External => external
            .ok_or_else(|| {
                Error::Config("external pool mode requires an unlabeled bank view".into())
            })?
            .to_vec(),
    };
    if vectors.is_empty() && gamma > 0 {
        return Err(Error::Config(format!(
            "unlabeled pool is empty but gamma = {gamma}"
        )));
    }
    Ok(UnlabeledPool { vectors, mode })
}

/// Indices of the `k` pool vectors nearest to `target` (Euclidean), ties by pool index.
pub fn nearest_k(target: &[f64], pool: &[&[f64]], k: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .map(|(i, v)| (sq_dist(target, v).sqrt(), i))
        .collect();
    if k < ranked.len() {
        ranked.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.truncate(k);
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().map(|(_, i)| i).collect()
}

/// Mean over the support vectors and the γ pool vectors nearest to `p`.
pub fn refine_prototype(
    p: &Prototype,
    support: &[&[f64]],
    pool: &UnlabeledPool<'_>,
    gamma: usize,
) -> Result<Prototype> {
    if gamma > pool.len() {
        return Err(Error::Config(format!(
            "gamma = {gamma} exceeds pool size {}",
            pool.len()
        )));
    }
    if support.is_empty() {
        return Err(Error::Empty("support set for refinement"));
    }
    if let Some(v) = pool.vectors.iter().find(|v| v.len() != p.vector.len()) {
        return Err(Error::DimMismatch {
            expected: p.vector.len(),
            got: v.len(),
        });
    }
    let mut members: Vec<&[f64]> = support.to_vec();
    members.extend(
        nearest_k(&p.vector, &pool.vectors, gamma)
            .into_iter()
            .map(|i| pool.vectors[i]),
    );
    Ok(Prototype {
        class_id: p.class_id,
        vector: mean_vec(&members)?,
        source: PrototypeSource::Refined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn raw(v: &[f64]) -> Prototype {
        Prototype {
            class_id: 0,
            vector: v.to_vec(),
            source: PrototypeSource::Raw,
        }
    }

    #[test]
    fn gamma_zero_keeps_prototype() {
        let s = [0.3, -0.7];
        let pool_v = [1.0, 1.0];
        let pool = UnlabeledPool {
            vectors: vec![&pool_v[..]],
            mode: PoolMode::External,
        };
        let r = refine_prototype(&raw(&s), &[&s[..]], &pool, 0).unwrap();
        assert_eq!(r.vector, s.to_vec());
        assert_eq!(r.source, PrototypeSource::Refined);
    }

    #[test]
    fn retrieves_nearest() {
        let s = [0.0, 0.0];
        let u = [[1.0, 0.0], [4.0, 0.0], [0.0, 2.0]];
        let pool = UnlabeledPool {
            vectors: u.iter().map(|v| &v[..]).collect(),
            mode: PoolMode::External,
        };
        let r = refine_prototype(&raw(&s), &[&s[..]], &pool, 1).unwrap();
        assert_eq!(r.vector, vec![0.5, 0.0]);
        assert!(refine_prototype(&raw(&s), &[&s[..]], &pool, 4).is_err());
    }

    #[test]
    fn leave_one_out_pool_sizes() {
        let qs: Vec<Vec<f64>> = (0..150).map(|i| vec![i as f64]).collect();
        let refs: Vec<&[f64]> = qs.iter().map(|v| v.as_slice()).collect();
        let pool = build_pool(PoolMode::LeaveOneOutQuery, &refs, Some(7), None, 4).unwrap();
        assert_eq!(pool.len(), 149);
        assert!(pool.vectors.iter().all(|v| v[0] != 7.0));
        let shared = build_pool(PoolMode::SharedQuery, &refs, None, None, 4).unwrap();
        assert_eq!(shared.len(), 150);
    }

    #[test]
    fn external_mode_needs_bank() {
        let err = build_pool(PoolMode::External, &[], None, None, 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = build_pool(PoolMode::LeaveOneOutQuery, &[], None, None, 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(build_pool(PoolMode::External, &[], None, Some(&[]), 1).is_err());
        assert!(build_pool(PoolMode::External, &[], None, Some(&[]), 0).is_ok());
    }

    proptest! {
        #[test]
        fn nearest_k_matches_brute_force(seed in any::<u64>(), k in 0usize..20) {
            let mut rng = RngStream::new(seed, 3);
            // coarse grid values force distance ties
            let pool: Vec<Vec<f64>> = (0..20).map(|_| (0..2).map(|_| rng.below(4) as f64).collect()).collect();
            let refs: Vec<&[f64]> = pool.iter().map(|v| v.as_slice()).collect();
            let target = [1.5, 1.0];
            let got = nearest_k(&target, &refs, k);
            let mut all: Vec<(f64, usize)> = pool
                .iter()
                .enumerate()
                .map(|(i, v)| (((v[0] - 1.5f64).powi(2) + (v[1] - 1.0f64).powi(2)).sqrt(), i))
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expected: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(got, expected);
        }
    }
}
