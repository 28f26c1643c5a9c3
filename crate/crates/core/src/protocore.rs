//! Class prototypes and nearest-prototype classification.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::{mean_vec, softmax, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrototypeSource {
    Raw,
    Restored,
    Refined,
    RefinedRestored,
}

impl fmt::Display for PrototypeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeSource::Raw => "raw",
            PrototypeSource::Restored => "restored",
            PrototypeSource::Refined => "refined",
            PrototypeSource::RefinedRestored => "refined_restored",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub class_id: u32,
    pub vector: Vec<f64>,
    pub source: PrototypeSource,
}

/// Mean of the support vectors of one class.
pub fn compute_prototype<'a, I>(support: I) -> Result<Prototype>
where
    I: IntoIterator<Item = (u32, &'a [f64])>,
{
    let mut class_id = None;
    let mut vectors = Vec::new();
    for (c, v) in support {
        match class_id {
            None => class_id = Some(c),
            Some(first) if first != c => return Err(Error::MixedClasses { first, other: c }),
            _ => {}
        }
        vectors.push(v);
    }
    let class_id = class_id.ok_or(Error::Empty("prototype support set"))?;
    Ok(Prototype {
        class_id,
        vector: mean_vec(&vectors)?,
        source: PrototypeSource::Raw,
    })
}

fn check_dims(query: &[f64], prototypes: &[Prototype]) -> Result<()> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype list"));
    }
    if let Some(p) = prototypes.iter().find(|p| p.vector.len() != query.len()) {
        return Err(Error::DimMismatch {
            expected: query.len(),
            got: p.vector.len(),
        });
    }
    Ok(())
}

/// Softmax over negative squared distances, in prototype order.
pub fn class_posteriors(query: &[f64], prototypes: &[Prototype]) -> Result<Vec<f64>> {
    check_dims(query, prototypes)?;
    let scores: Vec<f64> = prototypes
        .iter()
        .map(|p| -sq_dist(query, &p.vector))
        .collect();
    softmax(&scores)
}

/// Class with the highest posterior; ties go to the lowest class id.
pub fn argmax_posterior(posteriors: &[f64], prototypes: &[Prototype]) -> Result<u32> {
    if posteriors.len() != prototypes.len() {
        return Err(Error::DimMismatch {
            expected: prototypes.len(),
            got: posteriors.len(),
        });
    }
    posteriors
        .iter()
        .zip(prototypes)
        .reduce(|best, cur| {
            if cur.0 > best.0 || (cur.0 == best.0 && cur.1.class_id < best.1.class_id) {
                cur
            } else {
                best
            }
        })
        .map(|(_, p)| p.class_id)
        .ok_or(Error::Empty("prototype list"))
}

/// Index into `prototypes` of the nearest one; ties go to the lowest class id.
pub(crate) fn nearest_index<P: AsRef<[f64]>>(
    query: &[f64],
    vectors: &[P],
    class_ids: &[u32],
) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, v) in vectors.iter().enumerate() {
        let d = sq_dist(query, v.as_ref());
        if d < best_d || (d == best_d && class_ids[i] < class_ids[best]) {
            best = i;
            best_d = d;
        }
    }
    best
}

pub fn classify_nn(query: &[f64], prototypes: &[Prototype]) -> Result<u32> {
    check_dims(query, prototypes)?;
    let vectors: Vec<&[f64]> = prototypes.iter().map(|p| p.vector.as_slice()).collect();
    let ids: Vec<u32> = prototypes.iter().map(|p| p.class_id).collect();
    Ok(ids[nearest_index(query, &vectors, &ids)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{sq_euclidean, RngStream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn proto(class_id: u32, v: &[f64]) -> Prototype {
        Prototype {
            class_id,
            vector: v.to_vec(),
            source: PrototypeSource::Raw,
        }
    }

    #[test]
    fn prototype_of_singleton_and_pair() {
        let v = [0.3, -1.0];
        assert_eq!(compute_prototype([(4, &v[..])]).unwrap().vector, v.to_vec());
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let p = compute_prototype([(2, &a[..]), (2, &b[..])]).unwrap();
        assert_eq!(p.vector, vec![0.5, 0.5]);
        assert_eq!(p.source, PrototypeSource::Raw);
        assert!(matches!(
            compute_prototype([(2, &a[..]), (3, &b[..])]),
            Err(Error::MixedClasses { first: 2, other: 3 })
        ));
        assert!(compute_prototype(std::iter::empty::<(u32, &[f64])>()).is_err());
    }

    #[test]
    fn posteriors_cases() {
        let protos = [proto(0, &[1.0, 0.0]), proto(1, &[0.0, 2.0])];
        let p = class_posteriors(&[0.0, 0.0], &protos).unwrap();
        let (e1, e4) = ((-1.0f64).exp(), (-4.0f64).exp());
        assert_relative_eq!(p[0], e1 / (e1 + e4), epsilon = 1e-12);
        assert_relative_eq!(p[1], e4 / (e1 + e4), epsilon = 1e-12);

        let p = class_posteriors(&[5.0, 5.0], &[proto(7, &[1.0, 1.0])]).unwrap();
        assert_eq!(p, vec![1.0]);

        let square = [
            proto(0, &[1.0, 0.0]),
            proto(1, &[-1.0, 0.0]),
            proto(2, &[0.0, 1.0]),
            proto(3, &[0.0, -1.0]),
        ];
        let p = class_posteriors(&[0.0, 0.0], &square).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert!(class_posteriors(&[0.0], &[]).is_err());
    }

    #[test]
    fn nn_ties_go_to_lowest_class() {
        let protos = [proto(3, &[1.0, 0.0]), proto(1, &[-1.0, 0.0])];
        assert_eq!(classify_nn(&[0.0, 0.0], &protos).unwrap(), 1);
        let post = class_posteriors(&[0.0, 0.0], &protos).unwrap();
        assert_eq!(argmax_posterior(&post, &protos).unwrap(), 1);
        assert_eq!(classify_nn(&[1.0, 0.0], &protos).unwrap(), 3);
        assert!(classify_nn(&[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn nn_matches_brute_force() {
        let mut rng = RngStream::new(77, 0);
        let protos: Vec<Prototype> = (0..6)
            .map(|c| proto(c, &(0..8).map(|_| rng.normal()).collect::<Vec<_>>()))
            .collect();
        for _ in 0..1000 {
            let q: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let mut best = (f64::INFINITY, u32::MAX);
            for p in &protos {
                let d = sq_euclidean(&q, &p.vector).unwrap();
                if d < best.0 {
                    best = (d, p.class_id);
                }
            }
            assert_eq!(classify_nn(&q, &protos).unwrap(), best.1);
        }
    }

    proptest! {
        #[test]
        fn argmax_equals_nn_and_translation_invariant(
            seed in any::<u64>(),
            n in 1usize..8,
            shift in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let mut rng = RngStream::new(seed, 1);
            let protos: Vec<Prototype> = (0..n)
                .map(|c| proto((n - c) as u32, &(0..4).map(|_| rng.uniform(-3.0, 3.0)).collect::<Vec<_>>()))
                .collect();
            let q: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let post = class_posteriors(&q, &protos).unwrap();
            prop_assert!((post.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert_eq!(argmax_posterior(&post, &protos).unwrap(), classify_nn(&q, &protos).unwrap());

            let moved: Vec<Prototype> = protos
                .iter()
                .map(|p| proto(p.class_id, &p.vector.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>()))
                .collect();
            let mq: Vec<f64> = q.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let post2 = class_posteriors(&mq, &moved).unwrap();
            for (a, b) in post.iter().zip(&post2) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn prototype_permutation_invariant(
            vs in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..10),
            seed in any::<u64>(),
        ) {
            let mut order: Vec<usize> = (0..vs.len()).collect();
            RngStream::new(seed, 0).shuffle(&mut order);
            let a = compute_prototype(vs.iter().map(|v| (0u32, v.as_slice()))).unwrap();
            let b = compute_prototype(order.iter().map(|&i| (0u32, vs[i].as_slice()))).unwrap();
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
