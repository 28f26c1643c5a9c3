//! Episodic embedding training: prototypical cross-entropy plus an auxiliary label
//! classifier on the embedding output. The classifier head is dropped after training.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::debug;
use ndarray::Array2;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::featstore::LabeledSet;
use crate::neural::{
    rows_to_array, AdamState, Checkpoint, DenseNet2, Gradients, LrSchedule, TrainConfig,
};
use crate::numerics::{softmax, RngStream};

const EMBED_STREAM: u64 = 0xe4b;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class.
    pub q_queries: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_queries: usize) -> Result<Self> {
        let spec = EpisodeSpec {
            n_way,
            k_shot,
            q_queries,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_queries == 0 {
            return Err(Error::Config(format!(
                "episode spec must be positive, got {}-way {}-shot {} queries",
                self.n_way, self.k_shot, self.q_queries
            )));
        }
        Ok(())
    }
}

/// Rows refer to the `LabeledSet` the episode was drawn from. All lists are class-major
/// in episode-local class order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    /// Episode-local class index → global class id.
    pub classes: Vec<u32>,
    pub k_shot: usize,
    pub q_queries: usize,
    pub pool_per_class: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
    /// Unlabeled extras (external self-training pool); empty unless requested.
    pub pool: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_label(&self, i: usize) -> usize {
        i / self.k_shot
    }

    pub fn query_label(&self, i: usize) -> usize {
        i / self.q_queries
    }
}

pub fn sample_episode(
    data: &LabeledSet,
    spec: &EpisodeSpec,
    rng: &mut RngStream,
) -> Result<Episode> {
    sample_episode_with_pool(data, spec, 0, rng)
}

/// Samples `n_way` classes, then `k_shot + q_queries + pool_per_class` distinct rows per class.
///
/// Support and query rows do not depend on `pool_per_class`, so episodes drawn with and
/// without a pool from equal streams share their labeled part.
pub fn sample_episode_with_pool(
    data: &LabeledSet,
    spec: &EpisodeSpec,
    pool_per_class: usize,
    rng: &mut RngStream,
) -> Result<Episode> {
    spec.validate()?;
    let groups: Vec<(u32, Vec<usize>)> = data.by_class().into_iter().collect();
    if groups.len() < spec.n_way {
        return Err(Error::Infeasible(format!(
            "{}-way episodes need at least {} classes; split has {}",
            spec.n_way,
            spec.n_way,
            groups.len()
        )));
    }
    let per_class = spec.k_shot + spec.q_queries + pool_per_class;
    if let Some((c, rows)) = groups.iter().find(|(_, rows)| rows.len() < per_class) {
        return Err(Error::Infeasible(format!(
            "class {c} has {} records; k_shot + q_queries{} = {per_class}",
            rows.len(),
            if pool_per_class > 0 { " + pool" } else { "" }
        )));
    }

    let chosen = rng.sample_indices(groups.len(), spec.n_way);
    let mut ep = Episode {
        classes: Vec::with_capacity(spec.n_way),
        k_shot: spec.k_shot,
        q_queries: spec.q_queries,
        pool_per_class,
        support: Vec::with_capacity(spec.n_way * spec.k_shot),
        query: Vec::with_capacity(spec.n_way * spec.q_queries),
        pool: Vec::with_capacity(spec.n_way * pool_per_class),
    };
    for (j, &g) in chosen.iter().enumerate() {
        let (class_id, rows) = &groups[g];
        let mut class_rng = RngStream::new(rng.next_u64(), j as u64);
        let picks = class_rng.sample_indices(rows.len(), per_class);
        ep.classes.push(*class_id);
        ep.support
            .extend(picks[..spec.k_shot].iter().map(|&i| rows[i]));
        ep.query.extend(
            picks[spec.k_shot..spec.k_shot + spec.q_queries]
                .iter()
                .map(|&i| rows[i]),
        );
        ep.pool.extend(
            picks[spec.k_shot + spec.q_queries..]
                .iter()
                .map(|&i| rows[i]),
        );
    }
    Ok(ep)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualLossConfig {
    pub w_proto: f64,
    pub w_cls: f64,
}

impl Default for DualLossConfig {
    fn default() -> Self {
        DualLossConfig {
            w_proto: 1.0,
            w_cls: 1.0,
        }
    }
}

impl DualLossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !ok(self.w_proto) || !ok(self.w_cls) || (self.w_proto == 0.0 && self.w_cls == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero, got {} / {}",
                self.w_proto, self.w_cls
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeLoss {
    pub loss: f64,
    pub proto_loss: f64,
    pub cls_loss: f64,
    pub embed_grads: Gradients,
    pub head_grads: Gradients,
}

/// Total loss `w_proto · CE(prototype posteriors) + w_cls · CE(head(embed(x)))` and its
/// gradients. `head_index` maps a global class id to the head's output unit.
pub fn episode_loss(
    embed: &DenseNet2,
    head: &DenseNet2,
    episode: &Episode,
    data: &LabeledSet,
    head_index: &BTreeMap<u32, usize>,
    cfg: &DualLossConfig,
) -> Result<EpisodeLoss> {
    cfg.validate()?;
    if head.in_dim() != embed.out_dim() {
        return Err(Error::DimMismatch {
            expected: embed.out_dim(),
            got: head.in_dim(),
        });
    }
    let n_way = episode.n_way();
    let n_sup = episode.support.len();
    let n_q = episode.query.len();
    let rows: Vec<&[f64]> = episode
        .support
        .iter()
        .chain(&episode.query)
        .map(|&i| data.vectors[i].as_slice())
        .collect();
    let x = rows_to_array(&rows, embed.in_dim())?;
    let (z, embed_cache) = embed.forward_batch(x.view())?;
    let dim = z.ncols();
    let mut dz = Array2::<f64>::zeros(z.raw_dim());

    let mut proto_loss = 0.0;
    if cfg.w_proto > 0.0 && n_q > 0 {
        let mut protos = Array2::<f64>::zeros((n_way, dim));
        for s in 0..n_sup {
            let j = episode.support_label(s);
            let mut row = protos.row_mut(j);
            row += &z.row(s);
        }
        protos /= episode.k_shot as f64;
        let mut dprotos = Array2::<f64>::zeros((n_way, dim));
        for qi in 0..n_q {
            let r = n_sup + qi;
            let y = episode.query_label(qi);
            let zr = z.row(r);
            let diffs: Vec<_> = (0..n_way).map(|j| &zr - &protos.row(j)).collect();
            let logits: Vec<f64> = diffs.iter().map(|d| -d.dot(d)).collect();
            let p = softmax(&logits)?;
            proto_loss -= p[y].max(f64::MIN_POSITIVE).ln();
            for j in 0..n_way {
                let g = cfg.w_proto * (p[j] - if j == y { 1.0 } else { 0.0 }) / n_q as f64;
                let mut dzr = dz.row_mut(r);
                dzr.scaled_add(-2.0 * g, &diffs[j]);
                let mut dp = dprotos.row_mut(j);
                dp.scaled_add(2.0 * g, &diffs[j]);
            }
        }
        proto_loss /= n_q as f64;
        for s in 0..n_sup {
            let j = episode.support_label(s);
            let mut dzs = dz.row_mut(s);
            dzs.scaled_add(1.0 / episode.k_shot as f64, &dprotos.row(j));
        }
    }

    let mut cls_loss = 0.0;
    let mut head_grads = Gradients::zeros_like(head);
    if cfg.w_cls > 0.0 {
        let (logits, head_cache) = head.forward_batch(z.view())?;
        let n_rows = rows.len() as f64;
        let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
        for (r, &row_idx) in episode.support.iter().chain(&episode.query).enumerate() {
            let label = data.labels[row_idx];
            let unit = *head_index
                .get(&label)
                .ok_or_else(|| Error::Config(format!("class {label} has no classifier unit")))?;
            if unit >= head.out_dim() {
                return Err(Error::Config(format!(
                    "classifier unit {unit} out of range"
                )));
            }
            let p = softmax(logits.row(r).as_slice().expect("row-major"))?;
            cls_loss -= p[unit].max(f64::MIN_POSITIVE).ln();
            for (k, pk) in p.iter().enumerate() {
                dlogits[[r, k]] = cfg.w_cls * (pk - if k == unit { 1.0 } else { 0.0 }) / n_rows;
            }
        }
        cls_loss /= n_rows;
        let (g, dz_head) = head.backward_batch(&head_cache, dlogits.view())?;
        head_grads = g;
        dz += &dz_head;
    }

    let loss = cfg.w_proto * proto_loss + cfg.w_cls * cls_loss;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            epoch: 0,
            step: 0,
            loss,
        });
    }
    let (embed_grads, _) = embed.backward_batch(&embed_cache, dz.view())?;
    Ok(EpisodeLoss {
        loss,
        proto_loss,
        cls_loss,
        embed_grads,
        head_grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbedConfig {
    pub episode: EpisodeSpec,
    pub episodes_per_epoch: usize,
    pub loss: DualLossConfig,
    pub hidden_dim: usize,
    /// Embedding width; `None` keeps the input width.
    pub out_dim: Option<usize>,
    pub head_hidden: usize,
    pub train: TrainConfig,
}

impl EmbedConfig {
    /// 5-way 1-shot 10-query, 100 episodes × 10 epochs.
    pub fn desk(seed: u64) -> Self {
        EmbedConfig {
            episode: EpisodeSpec {
                n_way: 5,
                k_shot: 1,
                q_queries: 10,
            },
            episodes_per_epoch: 100,
            loss: DualLossConfig::default(),
            hidden_dim: 128,
            out_dim: None,
            head_hidden: 256,
            train: TrainConfig {
                lr: 1e-3,
                epochs: 10,
                batch_size: 1,
                schedule: LrSchedule::HalveEvery(20),
                seed,
            },
        }
    }

    /// 30-way 1-shot 10-query, 600 episodes per epoch, lr 1e-3 halved every 20 epochs.
    pub fn full_scale(seed: u64, epochs: usize) -> Self {
        EmbedConfig {
            episode: EpisodeSpec {
                n_way: 30,
                k_shot: 1,
                q_queries: 10,
            },
            episodes_per_epoch: 600,
            hidden_dim: 512,
            out_dim: Some(512),
            train: TrainConfig {
                epochs,
                ..Self::desk(seed).train
            },
            ..Self::desk(seed)
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "episode={}-way/{}-shot/{}-query episodes_per_epoch={} w_proto={} w_cls={} hidden={} \
             out={} head_hidden={} {}",
            self.episode.n_way,
            self.episode.k_shot,
            self.episode.q_queries,
            self.episodes_per_epoch,
            self.loss.w_proto,
            self.loss.w_cls,
            self.hidden_dim,
            self.out_dim.map_or("in".to_string(), |d| d.to_string()),
            self.head_hidden,
            self.train.describe()
        )
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingTraining {
    pub net: DenseNet2,
    /// `(epoch, episode, loss)` per optimization step.
    pub log: Vec<(usize, usize, f64)>,
    pub epoch_means: Vec<f64>,
    pub config: EmbedConfig,
}

impl EmbeddingTraining {
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for (e, i, l) in &self.log {
            writeln!(out, "{e},{i},{l}").unwrap();
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = [
            ("kind", "embedding".to_string()),
            ("config", self.config.describe()),
            ("seed", self.config.train.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Checkpoint {
            net: self.net.clone(),
            meta,
        }
    }
}

/// One Adam step per episode on both networks; returns the embedding only.
pub fn train_embedding(data: &LabeledSet, cfg: &EmbedConfig) -> Result<EmbeddingTraining> {
    cfg.train.validate()?;
    cfg.loss.validate()?;
    cfg.episode.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("embedding training set"));
    }
    let classes = data.classes();
    let head_index: BTreeMap<u32, usize> =
        classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let out_dim = cfg.out_dim.unwrap_or(data.dim);

    let root = RngStream::new(cfg.train.seed, EMBED_STREAM);
    let mut embed = DenseNet2::glorot(data.dim, cfg.hidden_dim, out_dim, &mut root.child(0))?;
    let mut head = DenseNet2::glorot(out_dim, cfg.head_hidden, classes.len(), &mut root.child(1))?;
    let mut episode_rng = root.child(2);
    // fail fast on infeasible specs, before any optimizer state exists
    sample_episode(data, &cfg.episode, &mut root.child(3))?;

    let mut embed_opt = AdamState::new(&embed, cfg.train.lr);
    let mut head_opt = AdamState::new(&head, cfg.train.lr);
    let mut log = Vec::with_capacity(cfg.train.epochs * cfg.episodes_per_epoch);
    let mut epoch_means = Vec::with_capacity(cfg.train.epochs);

    for epoch in 0..cfg.train.epochs {
        let lr = cfg.train.lr_at(epoch);
        embed_opt.lr = lr;
        head_opt.lr = lr;
        let mut total = 0.0;
        for i in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(data, &cfg.episode, &mut episode_rng)?;
            let out = episode_loss(&embed, &head, &ep, data, &head_index, &cfg.loss).map_err(
                |e| match e {
                    Error::Diverged { loss, .. } => Error::Diverged {
                        epoch,
                        step: i,
                        loss,
                    },
                    other => other,
                },
            )?;
            embed_opt.step(&mut embed, &out.embed_grads)?;
            head_opt.step(&mut head, &out.head_grads)?;
            total += out.loss;
            log.push((epoch, i, out.loss));
        }
        let mean = total / cfg.episodes_per_epoch.max(1) as f64;
        debug!("embed epoch {epoch}: loss {mean:.5}");
        epoch_means.push(mean);
    }

    Ok(EmbeddingTraining {
        net: embed,
        log,
        epoch_means,
        config: *cfg,
    })
}

/// Applies a frozen embedding to every vector of a set.
pub fn embed_set(net: &DenseNet2, data: &LabeledSet) -> Result<LabeledSet> {
    let vectors = net.apply_many(&data.vectors)?;
    LabeledSet::new(net.out_dim(), vectors, data.labels.clone())
}
