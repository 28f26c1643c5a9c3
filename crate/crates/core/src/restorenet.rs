//! Prototype restoration: mine (far sample → class centroid) pairs, fit the regressor `M`,
//! and restore prototypes as `R(p) = ½·M(p) + ½·p`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::debug;

use crate::error::{Error, Result};
use crate::featstore::LabeledSet;
use crate::neural::{rows_to_array, AdamState, Checkpoint, DenseNet2, LrSchedule, TrainConfig};
use crate::numerics::{mean_vec, sq_dist, RngStream};
use crate::protocore::{Prototype, PrototypeSource};

const RESTORE_STREAM: u64 = 0x7e57;

pub const DEFAULT_HIDDEN: usize = 256;

pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 100,
        batch_size: 32,
        schedule: LrSchedule::Fixed,
        seed,
    }
}

/// Per-class centroid over every record of the class.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPrototypes {
    pub targets: BTreeMap<u32, Vec<f64>>,
}

pub fn compute_targets(data: &LabeledSet) -> Result<TargetPrototypes> {
    let mut targets = BTreeMap::new();
    for (class_id, rows) in data.by_class() {
        let members: Vec<&[f64]> = rows.iter().map(|&i| data.vectors[i].as_slice()).collect();
        targets.insert(class_id, mean_vec(&members)?);
    }
    if targets.is_empty() {
        return Err(Error::Empty("no classes to compute targets for"));
    }
    Ok(TargetPrototypes { targets })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub class_id: u32,
    /// 0 = farthest member of the class.
    pub rank: usize,
    /// Row in the source set.
    pub record: usize,
    pub distance: f64,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub lambda: usize,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `class_id,rank,distance` lines.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            writeln!(out, "{},{},{}", p.class_id, p.rank, p.distance).unwrap();
        }
        out
    }
}

/// The `lambda` members of each class farthest (Euclidean) from its target; ties by row index.
pub fn collect_pairs(
    data: &LabeledSet,
    targets: &TargetPrototypes,
    lambda: usize,
) -> Result<PairSet> {
    if lambda == 0 {
        return Err(Error::Config("lambda must be at least 1".into()));
    }
    let mut pairs = Vec::new();
    for (class_id, rows) in data.by_class() {
        let target = targets
            .targets
            .get(&class_id)
            .ok_or_else(|| Error::Config(format!("no target prototype for class {class_id}")))?;
        if target.len() != data.dim {
            return Err(Error::DimMismatch {
                expected: data.dim,
                got: target.len(),
            });
        }
        let mut ranked: Vec<(f64, usize)> = rows
            .iter()
            .map(|&i| (sq_dist(&data.vectors[i], target).sqrt(), i))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (rank, &(distance, record)) in ranked.iter().take(lambda).enumerate() {
            pairs.push(Pair {
                class_id,
                rank,
                record,
                distance,
                input: data.vectors[record].clone(),
                target: target.clone(),
            });
        }
    }
    Ok(PairSet { lambda, pairs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreModel {
    pub net: DenseNet2,
    pub lambda: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RestoreTraining {
    pub model: RestoreModel,
    /// Mean per-pair squared distance for each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_restore(
    pairs: &PairSet,
    hidden_dim: usize,
    train: &TrainConfig,
) -> Result<RestoreTraining> {
    train.validate()?;
    let first = pairs
        .pairs
        .first()
        .ok_or(Error::Empty("restoration pair set"))?;
    let dim = first.input.len();
    let root = RngStream::new(train.seed, RESTORE_STREAM);
    let mut net = DenseNet2::glorot(dim, hidden_dim, dim, &mut root.child(0))?;
    let mut order_rng = root.child(1);
    let mut adam = AdamState::new(&net, train.lr);

    let inputs: Vec<&[f64]> = pairs.pairs.iter().map(|p| p.input.as_slice()).collect();
    let targets: Vec<&[f64]> = pairs.pairs.iter().map(|p| p.target.as_slice()).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(train.epochs);
    let mut step = 0;

    for epoch in 0..train.epochs {
        adam.lr = train.lr_at(epoch);
        order_rng.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let x = rows_to_array(&batch.iter().map(|&i| inputs[i]).collect::<Vec<_>>(), dim)?;
            let t = rows_to_array(&batch.iter().map(|&i| targets[i]).collect::<Vec<_>>(), dim)?;
            let (y, cache) = net.forward_batch(x.view())?;
            let diff = y - &t;
            let loss: f64 = diff.iter().map(|d| d * d).sum();
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            total += loss;
            let dy = diff * (2.0 / batch.len() as f64);
            let (grads, _) = net.backward_batch(&cache, dy.view())?;
            adam.step(&mut net, &grads)?;
            step += 1;
        }
        let mean = total / pairs.len() as f64;
        debug!("restore epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }

    Ok(RestoreTraining {
        model: RestoreModel {
            net,
            lambda: pairs.lambda,
            train: *train,
        },
        epoch_losses,
    })
}

impl RestoreModel {
    pub fn dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.net.apply(v)
    }

    /// `½·M(v) + ½·v` for a raw vector.
    pub fn restore_vector(&self, v: &[f64]) -> Result<Vec<f64>> {
        let m = self.net.apply(v)?;
        Ok(m.iter().zip(v).map(|(a, b)| 0.5 * a + 0.5 * b).collect())
    }

    /// Batched `restore_vector`.
    pub fn restore_many<V: AsRef<[f64]>>(&self, vs: &[V]) -> Result<Vec<Vec<f64>>> {
        let ms = self.net.apply_many(vs)?;
        Ok(ms
            .into_iter()
            .zip(vs)
            .map(|(m, v)| {
                m.iter()
                    .zip(v.as_ref())
                    .map(|(a, b)| 0.5 * a + 0.5 * b)
                    .collect()
            })
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = [
            ("kind", "restore".to_string()),
            ("lambda", self.lambda.to_string()),
            ("train", self.train.describe()),
            ("seed", self.train.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Checkpoint {
            net: self.net.clone(),
            meta,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.net.in_dim() != ckpt.net.out_dim() {
            return Err(Error::Checkpoint(format!(
                "restoration model must be square, got {}-{}-{}",
                ckpt.net.in_dim(),
                ckpt.net.hidden_dim(),
                ckpt.net.out_dim()
            )));
        }
        let lambda = ckpt
            .meta
            .get("lambda")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        let seed = ckpt
            .meta
            .get("seed")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0);
        Ok(RestoreModel {
            net: ckpt.net,
            lambda,
            train: default_train_config(seed),
        })
    }
}

pub fn restore(model: &RestoreModel, p: &Prototype) -> Result<Prototype> {
    let source = match p.source {
        PrototypeSource::Raw => PrototypeSource::Restored,
        PrototypeSource::Refined => PrototypeSource::RefinedRestored,
        other => return Err(Error::Config(format!("prototype is already {other}"))),
    };
    Ok(Prototype {
        class_id: p.class_id,
        vector: model.restore_vector(&p.vector)?,
        source,
    })
}

pub fn write_pair_dump(pairs: &PairSet, path: &Path) -> Result<()> {
    fs::write(path, pairs.dump()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sq_euclidean;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn set(rows: &[(u32, Vec<f64>)]) -> LabeledSet {
        let dim = rows[0].1.len();
        LabeledSet::new(
            dim,
            rows.iter().map(|r| r.1.clone()).collect(),
            rows.iter().map(|r| r.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn targets_are_class_means() {
        let data = set(&[
            (0, vec![0.0]),
            (0, vec![1.0]),
            (0, vec![10.0]),
            (1, vec![2.0]),
            (1, vec![2.0]),
        ]);
        let t = compute_targets(&data).unwrap();
        assert_relative_eq!(t.targets[&0][0], 11.0 / 3.0, epsilon = 1e-12);
        assert_eq!(t.targets[&1], vec![2.0]);
    }

    #[test]
    fn farthest_member_selected() {
        let data = set(&[(0, vec![0.0]), (0, vec![1.0]), (0, vec![10.0])]);
        let t = compute_targets(&data).unwrap();
        let pairs = collect_pairs(&data, &t, 1).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs.pairs[0].input, vec![10.0]);
        assert_eq!(pairs.pairs[0].rank, 0);

        let all = collect_pairs(&data, &t, 50).unwrap();
        assert_eq!(all.len(), 3);
        let inputs: Vec<f64> = all.pairs.iter().map(|p| p.input[0]).collect();
        assert_eq!(inputs, vec![10.0, 0.0, 1.0]);
        assert!(collect_pairs(&data, &t, 0).is_err());
    }

    #[test]
    fn distance_ties_break_by_row() {
        let data = set(&[(0, vec![-1.0]), (0, vec![1.0]), (0, vec![0.0])]);
        let t = compute_targets(&data).unwrap();
        let pairs = collect_pairs(&data, &t, 1).unwrap();
        assert_eq!(pairs.pairs[0].record, 0);
    }

    #[test]
    fn pair_dump_format() {
        let data = set(&[(3, vec![0.0]), (3, vec![2.0])]);
        let t = compute_targets(&data).unwrap();
        let dump = collect_pairs(&data, &t, 2).unwrap().dump();
        assert_eq!(dump, "3,0,1\n3,1,1\n");
    }

    #[test]
    fn restore_is_midpoint() {
        let mut net = DenseNet2::zeros(2, 1, 2);
        // M(p) = (0, 2) regardless of input
        net.b2[1] = 2.0;
        let model = RestoreModel {
            net,
            lambda: 1,
            train: default_train_config(0),
        };
        let p = Prototype {
            class_id: 0,
            vector: vec![2.0, 0.0],
            source: PrototypeSource::Raw,
        };
        let r = restore(&model, &p).unwrap();
        assert_eq!(r.vector, vec![1.0, 1.0]);
        assert_eq!(r.source, PrototypeSource::Restored);
        let refined = Prototype {
            source: PrototypeSource::Refined,
            ..p.clone()
        };
        assert_eq!(
            restore(&model, &refined).unwrap().source,
            PrototypeSource::RefinedRestored
        );
        assert!(restore(&model, &r).is_err());
        let wrong = Prototype {
            vector: vec![1.0; 3],
            ..p
        };
        assert!(restore(&model, &wrong).is_err());
    }

    #[test]
    fn identity_pairs_train_to_near_identity() {
        let mut rng = RngStream::new(3, 0);
        let dim = 8;
        let pairs = PairSet {
            lambda: 1,
            pairs: (0..200)
                .map(|i| {
                    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
                    Pair {
                        class_id: 0,
                        rank: i,
                        record: i,
                        distance: 0.0,
                        input: v.clone(),
                        target: v,
                    }
                })
                .collect(),
        };
        let cfg = TrainConfig {
            lr: 1e-2,
            ..default_train_config(1)
        };
        let out = train_restore(&pairs, 64, &cfg).unwrap();
        let last = *out.epoch_losses.last().unwrap();
        assert!(last < 1e-3 * dim as f64, "final loss {last}");
        for p in pairs.pairs.iter().take(10) {
            let m = out.model.transform(&p.input).unwrap();
            assert!(sq_euclidean(&m, &p.input).unwrap() < 0.05 * dim as f64);
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_net() {
        let pairs = PairSet {
            lambda: 1,
            pairs: vec![Pair {
                class_id: 0,
                rank: 0,
                record: 0,
                distance: 0.0,
                input: vec![1.0, 2.0],
                target: vec![0.0, 0.0],
            }],
        };
        let cfg = TrainConfig {
            epochs: 0,
            ..default_train_config(4)
        };
        let a = train_restore(&pairs, 3, &cfg).unwrap();
        assert!(a.epoch_losses.is_empty());
        let b = train_restore(&pairs, 3, &cfg).unwrap();
        assert_eq!(a.model.net, b.model.net);
        assert!(train_restore(
            &PairSet {
                lambda: 1,
                pairs: vec![]
            },
            3,
            &cfg
        )
        .is_err());
    }

    #[test]
    fn checkpoint_metadata_round_trip() {
        let model = RestoreModel {
            net: DenseNet2::zeros(4, 2, 4),
            lambda: 60,
            train: default_train_config(7),
        };
        let back = RestoreModel::from_checkpoint(model.to_checkpoint()).unwrap();
        assert_eq!(back.lambda, 60);
        assert_eq!(back.train.seed, 7);
        let bad = Checkpoint {
            net: DenseNet2::zeros(4, 2, 3),
            meta: BTreeMap::new(),
        };
        assert!(RestoreModel::from_checkpoint(bad).is_err());
    }

    proptest! {
        #[test]
        fn restore_is_exact_average(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed, 0);
            let net = DenseNet2::glorot(6, 4, 6, &mut rng).unwrap();
            let model = RestoreModel { net, lambda: 1, train: default_train_config(0) };
            let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let m = model.transform(&v).unwrap();
            let r = model.restore_vector(&v).unwrap();
            for i in 0..6 {
                prop_assert!((r[i] - 0.5 * m[i] - 0.5 * v[i]).abs() <= 1e-6);
            }
            let many = model.restore_many(std::slice::from_ref(&v)).unwrap();
            for (a, b) in many[0].iter().zip(&r) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn squared_distance_selects_same_set(seed in any::<u64>(), lambda in 1usize..12) {
            let mut rng = RngStream::new(seed, 2);
            let rows: Vec<(u32, Vec<f64>)> = (0..30)
                .map(|i| ((i % 3) as u32, (0..3).map(|_| rng.uniform(-2.0, 2.0)).collect()))
                .collect();
            let data = set(&rows);
            let t = compute_targets(&data).unwrap();
            let got: Vec<usize> = collect_pairs(&data, &t, lambda).unwrap().pairs.iter().map(|p| p.record).collect();
            let mut expected = Vec::new();
            for c in 0..3u32 {
                let mut rs: Vec<(f64, usize)> = (0..30)
                    .filter(|i| rows[*i].0 == c)
                    .map(|i| (sq_euclidean(&rows[i].1, &t.targets[&c]).unwrap(), i))
                    .collect();
                rs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                expected.extend(rs.iter().take(lambda).map(|r| r.1));
            }
            prop_assert_eq!(got, expected);
        }
    }
}
