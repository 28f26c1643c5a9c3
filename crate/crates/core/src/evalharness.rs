//! Paired episodic evaluation of the four prototype pipelines, plus the sweeps and
//! analyses built on top of it.
//!
//! Episode `i` is always drawn from `RngStream::new(seed, EVAL_STREAM).child(i)`, so every
//! variant, λ and `jobs` value sees the same episode sequence for a given master seed.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;

use crate::embedtrain::{sample_episode_with_pool, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::featstore::LabeledSet;
use crate::neural::TrainConfig;
use crate::numerics::{
    ci95, euclidean, format_pct, mean_vec, pca2d, write_plot_data, PlotPoint, PlotTag, RngStream,
};
use crate::protocore::{classify_nn, Prototype, PrototypeSource};
use crate::restorenet::{collect_pairs, compute_targets, restore, train_restore, RestoreModel};
use crate::selftrain::{nearest_k, PoolMode, DEFAULT_GAMMA};

pub const EVAL_STREAM: u64 = 0xe7a1;
pub const DEFAULT_EPISODES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Restore,
    SelfTrain,
    SelfRestore,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Restore,
        Variant::SelfTrain,
        Variant::SelfRestore,
    ];

    pub fn needs_model(self) -> bool {
        matches!(self, Variant::Restore | Variant::SelfRestore)
    }

    pub fn refines(self) -> bool {
        matches!(self, Variant::SelfTrain | Variant::SelfRestore)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Restore => "restore",
            Variant::SelfTrain => "self",
            Variant::SelfRestore => "self_restore",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "restore" => Ok(Variant::Restore),
            "self" => Ok(Variant::SelfTrain),
            "self_restore" | "self-restore" => Ok(Variant::SelfRestore),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub episode: EpisodeSpec,
    pub n_episodes: usize,
    pub variant: Variant,
    pub gamma: usize,
    pub pool_mode: PoolMode,
    pub seed: u64,
    /// Worker threads; never affects results.
    pub jobs: usize,
    /// Free-form model provenance echoed into the report (e.g. checkpoint path).
    pub model_label: Option<String>,
}

impl EvalConfig {
    /// 5-way 1-shot, 30 queries per class, external pool, γ = 4.
    pub fn desk(variant: Variant, seed: u64) -> Self {
        EvalConfig {
            episode: EpisodeSpec {
                n_way: 5,
                k_shot: 1,
                q_queries: 30,
            },
            n_episodes: DEFAULT_EPISODES,
            variant,
            gamma: DEFAULT_GAMMA,
            pool_mode: PoolMode::External,
            seed,
            jobs: 1,
            model_label: None,
        }
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        EvalConfig {
            variant,
            ..self.clone()
        }
    }

    /// Extra rows drawn per class. Depends only on the pool mode so that all variants
    /// share episodes (and feasibility).
    pub fn pool_per_class(&self) -> usize {
        match self.pool_mode {
            PoolMode::External => self.episode.q_queries,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if self.n_episodes == 0 {
            return Err(Error::Config("n_episodes must be positive".into()));
        }
        if self.variant.refines() && self.gamma > 0 {
            let pool = match self.pool_mode {
                PoolMode::External => self.episode.n_way * self.episode.q_queries,
                PoolMode::LeaveOneOutQuery => self.episode.n_way * self.episode.q_queries - 1,
                PoolMode::SharedQuery => self.episode.n_way * self.episode.q_queries,
            };
            if self.gamma > pool {
                return Err(Error::Config(format!(
                    "gamma = {} exceeds pool size {pool}",
                    self.gamma
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Fraction correct per episode, in episode-index order.
    pub per_episode: Vec<f64>,
    pub mean_pct: f64,
    pub ci95_pct: f64,
    mean: f64,
    half_width: f64,
}

impl EvalReport {
    pub fn from_accuracies(config: EvalConfig, per_episode: Vec<f64>) -> Result<Self> {
        let (mean, half) = ci95(&per_episode)?;
        Ok(EvalReport {
            config,
            per_episode,
            mean_pct: 100.0 * mean,
            ci95_pct: 100.0 * half,
            mean,
            half_width: half,
        })
    }

    pub fn summary(&self) -> String {
        format_pct(self.mean, self.half_width)
    }

    /// `key=value` lines; excludes `jobs` so reports are identical across parallelism.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| writeln!(out, "{k}={v}").unwrap();
        kv("variant", &c.variant);
        kv("n_way", &c.episode.n_way);
        kv("k_shot", &c.episode.k_shot);
        kv("queries", &c.episode.q_queries);
        kv("n_episodes", &self.per_episode.len());
        kv("gamma", &c.gamma);
        kv("pool_mode", &c.pool_mode);
        kv("seed", &c.seed);
        kv("model", &c.model_label.as_deref().unwrap_or("none"));
        kv("mean_pct", &self.mean_pct);
        kv("ci95_pct", &self.ci95_pct);
        kv("summary", &self.summary());
        out
    }

    pub fn per_episode_csv(&self) -> String {
        let mut out = String::from("episode_index,accuracy\n");
        for (i, a) in self.per_episode.iter().enumerate() {
            writeln!(out, "{i},{a}").unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn write_per_episode(&self, path: &Path) -> Result<()> {
        fs::write(path, self.per_episode_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Mean and 95% half-width (both in points) of the per-episode difference `treated − base`.
pub fn paired_difference(base: &EvalReport, treated: &EvalReport) -> Result<(f64, f64)> {
    if base.per_episode.len() != treated.per_episode.len() {
        return Err(Error::Config(format!(
            "paired comparison needs equal episode counts, got {} and {}",
            base.per_episode.len(),
            treated.per_episode.len()
        )));
    }
    let diffs: Vec<f64> = treated
        .per_episode
        .iter()
        .zip(&base.per_episode)
        .map(|(t, b)| t - b)
        .collect();
    let (m, h) = ci95(&diffs)?;
    Ok((100.0 * m, 100.0 * h))
}

pub fn episode_rng(seed: u64, index: usize) -> RngStream {
    RngStream::new(seed, EVAL_STREAM).child(index as u64)
}

/// Accuracy of one episode under `cfg.variant`.
pub fn eval_episode(
    data: &LabeledSet,
    episode: &Episode,
    cfg: &EvalConfig,
    model: Option<&RestoreModel>,
) -> Result<f64> {
    let vec_of = |i: usize| data.vectors[i].as_slice();
    let k = episode.k_shot;
    let supports: Vec<Vec<&[f64]>> = (0..episode.n_way())
        .map(|j| {
            episode.support[j * k..(j + 1) * k]
                .iter()
                .map(|&i| vec_of(i))
                .collect()
        })
        .collect();
    let raw: Vec<Prototype> = supports
        .iter()
        .zip(&episode.classes)
        .map(|(s, &c)| {
            Ok(Prototype {
                class_id: c,
                vector: mean_vec(s)?,
                source: PrototypeSource::Raw,
            })
        })
        .collect::<Result<_>>()?;
    let queries: Vec<&[f64]> = episode.query.iter().map(|&i| vec_of(i)).collect();
    let truth: Vec<u32> = (0..queries.len())
        .map(|i| episode.classes[episode.query_label(i)])
        .collect();

    let model = if cfg.variant.needs_model() {
        let m = model.ok_or_else(|| {
            Error::Config(format!(
                "variant {} requires a restoration model",
                cfg.variant
            ))
        })?;
        if m.dim() != data.dim {
            return Err(Error::DimMismatch {
                expected: data.dim,
                got: m.dim(),
            });
        }
        Some(m)
    } else {
        None
    };
    let finish = |protos: &[Prototype]| -> Result<Vec<Prototype>> {
        match model {
            Some(m) => protos.iter().map(|p| restore(m, p)).collect(),
            None => Ok(protos.to_vec()),
        }
    };

    let mut correct = 0usize;
    if !cfg.variant.refines() {
        let protos = finish(&raw)?;
        for (q, &t) in queries.iter().zip(&truth) {
            correct += usize::from(classify_nn(q, &protos)? == t);
        }
    } else {
        let gamma = cfg.gamma;
        match cfg.pool_mode {
            PoolMode::External | PoolMode::SharedQuery => {
                let pool: Vec<&[f64]> = if cfg.pool_mode == PoolMode::External {
                    episode.pool.iter().map(|&i| vec_of(i)).collect()
                } else {
                    queries.clone()
                };
                let refined: Vec<Prototype> = raw
                    .iter()
                    .zip(&supports)
                    .map(|(p, s)| refined_from(p, s, &pool, &nearest_k(&p.vector, &pool, gamma)))
                    .collect::<Result<_>>()?;
                let protos = finish(&refined)?;
                for (q, &t) in queries.iter().zip(&truth) {
                    correct += usize::from(classify_nn(q, &protos)? == t);
                }
            }
            PoolMode::LeaveOneOutQuery => {
                // Excluding a query changes a class's refined prototype only if that query
                // is among the γ retrieved; then the (γ+1)-th neighbour takes its place.
                let ranked: Vec<Vec<usize>> = raw
                    .iter()
                    .map(|p| nearest_k(&p.vector, &queries, gamma + 1))
                    .collect();
                if ranked.iter().any(|r| r.len() < gamma + 1) {
                    return Err(Error::Config(format!(
                        "gamma = {gamma} exceeds leave-one-out pool size {}",
                        queries.len().saturating_sub(1)
                    )));
                }
                let mut shared = Vec::with_capacity(raw.len());
                for ((p, s), r) in raw.iter().zip(&supports).zip(&ranked) {
                    shared.push(refined_from(p, s, &queries, &r[..gamma])?);
                }
                let shared = finish(&shared)?;
                let mut cache: BTreeMap<(usize, usize), Prototype> = BTreeMap::new();
                for (qi, (q, &t)) in queries.iter().zip(&truth).enumerate() {
                    let mut protos = shared.clone();
                    for (j, r) in ranked.iter().enumerate() {
                        if r[..gamma].contains(&qi) {
                            if let Some(p) = cache.get(&(j, qi)) {
                                protos[j] = p.clone();
                                continue;
                            }
                            let picks: Vec<usize> =
                                r.iter().copied().filter(|&x| x != qi).collect();
                            let p = refined_from(&raw[j], &supports[j], &queries, &picks)?;
                            let p = finish(std::slice::from_ref(&p))?.remove(0);
                            cache.insert((j, qi), p.clone());
                            protos[j] = p;
                        }
                    }
                    correct += usize::from(classify_nn(q, &protos)? == t);
                }
            }
        }
    }
    Ok(correct as f64 / queries.len() as f64)
}

fn refined_from(
    p: &Prototype,
    support: &[&[f64]],
    pool: &[&[f64]],
    picks: &[usize],
) -> Result<Prototype> {
    let mut members: Vec<&[f64]> = support.to_vec();
    members.extend(picks.iter().map(|&i| pool[i]));
    Ok(Prototype {
        class_id: p.class_id,
        vector: mean_vec(&members)?,
        source: PrototypeSource::Refined,
    })
}

pub fn run_eval(
    data: &LabeledSet,
    cfg: &EvalConfig,
    model: Option<&RestoreModel>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if cfg.variant.needs_model() && model.is_none() {
        return Err(Error::Config(format!(
            "variant {} requires a restoration model",
            cfg.variant
        )));
    }
    // surface infeasibility once, before spinning up workers
    sample_episode_with_pool(
        data,
        &cfg.episode,
        cfg.pool_per_class(),
        &mut episode_rng(cfg.seed, 0),
    )?;

    let one = |i: usize| -> Result<f64> {
        let ep = sample_episode_with_pool(
            data,
            &cfg.episode,
            cfg.pool_per_class(),
            &mut episode_rng(cfg.seed, i),
        )?;
        eval_episode(data, &ep, cfg, model)
    };
    let per_episode: Vec<f64> = if cfg.jobs <= 1 {
        (0..cfg.n_episodes).map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        pool.install(|| {
            (0..cfg.n_episodes)
                .into_par_iter()
                .map(one)
                .collect::<Result<_>>()
        })?
    };
    let report = EvalReport::from_accuracies(cfg.clone(), per_episode)?;
    info!(
        "{} {}-way {}-shot: {}",
        cfg.variant,
        cfg.episode.n_way,
        cfg.episode.k_shot,
        report.summary()
    );
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct NwayRow {
    pub n_way: usize,
    pub baseline: EvalReport,
    pub restore: EvalReport,
}

impl NwayRow {
    pub fn enhancement(&self) -> f64 {
        self.restore.mean_pct - self.baseline.mean_pct
    }
}

/// Baseline and restore reports per way, on shared episodes. `template.variant` is ignored.
pub fn nway_sweep(
    data: &LabeledSet,
    ways: &[usize],
    template: &EvalConfig,
    model: &RestoreModel,
) -> Result<Vec<NwayRow>> {
    ways.iter()
        .map(|&n_way| {
            let mut cfg = template.clone();
            cfg.episode.n_way = n_way;
            Ok(NwayRow {
                n_way,
                baseline: run_eval(data, &cfg.with_variant(Variant::Baseline), None)?,
                restore: run_eval(data, &cfg.with_variant(Variant::Restore), Some(model))?,
            })
        })
        .collect()
}

pub fn format_nway_table(rows: &[NwayRow]) -> String {
    let mut out = String::from("n_way,baseline,restore,enhancement\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.2}",
            r.n_way,
            r.baseline.summary(),
            r.restore.summary(),
            r.enhancement()
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct LambdaRow {
    pub lambda: usize,
    pub baseline_pct: f64,
    pub restore: EvalReport,
    pub enhancement: f64,
    /// Paired difference (mean, half-width) in points.
    pub paired: (f64, f64),
}

/// Trains one model per λ with identical seeds on `base`, and evaluates each on the same
/// episodes of `novel`. `eval.variant` picks the baseline (`Baseline` or `SelfTrain`); the
/// treated variant is its restoring counterpart.
pub fn lambda_sweep(
    base: &LabeledSet,
    novel: &LabeledSet,
    lambdas: &[usize],
    hidden_dim: usize,
    train: &TrainConfig,
    eval: &EvalConfig,
) -> Result<Vec<LambdaRow>> {
    let (plain, treated) = match eval.variant {
        Variant::SelfTrain | Variant::SelfRestore => (Variant::SelfTrain, Variant::SelfRestore),
        _ => (Variant::Baseline, Variant::Restore),
    };
    let baseline = run_eval(novel, &eval.with_variant(plain), None)?;
    let targets = compute_targets(base)?;
    lambdas
        .iter()
        .map(|&lambda| {
            let pairs = collect_pairs(base, &targets, lambda)?;
            let model = train_restore(&pairs, hidden_dim, train)?.model;
            let mut cfg = eval.with_variant(treated);
            cfg.model_label = Some(format!("lambda={lambda}"));
            let restore = run_eval(novel, &cfg, Some(&model))?;
            Ok(LambdaRow {
                lambda,
                baseline_pct: baseline.mean_pct,
                enhancement: restore.mean_pct - baseline.mean_pct,
                paired: paired_difference(&baseline, &restore)?,
                restore,
            })
        })
        .collect()
}

pub fn format_lambda_table(rows: &[LambdaRow]) -> String {
    let mut out = String::from("lambda,baseline_pct,restore_pct,enhancement\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.2},{:.2},{:.2}",
            r.lambda, r.baseline_pct, r.restore.mean_pct, r.enhancement
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceStats {
    pub n_records: usize,
    pub excluded_classes: Vec<u32>,
    /// Mean distance to the class center of p, M(p) and R(p).
    pub raw: f64,
    pub transformed: f64,
    pub restored: f64,
}

impl DistanceStats {
    pub fn to_text(&self) -> String {
        format!(
            "records={}\nexcluded_classes={:?}\nraw={:.4}\ntransformed={:.4}\nrestored={:.4}\n",
            self.n_records, self.excluded_classes, self.raw, self.transformed, self.restored
        )
    }
}

/// Per-record Euclidean distances to the class centroid (over all records of the class in
/// `test`); classes with a single record are skipped.
pub fn distance_stats(test: &LabeledSet, model: &RestoreModel) -> Result<DistanceStats> {
    if model.dim() != test.dim {
        return Err(Error::DimMismatch {
            expected: test.dim,
            got: model.dim(),
        });
    }
    let mut excluded = Vec::new();
    let (mut raw, mut transformed, mut restored) = (0.0, 0.0, 0.0);
    let mut n = 0usize;
    for (c, rows) in test.by_class() {
        if rows.len() < 2 {
            warn!("class {c} has a single test record; excluded from distance statistics");
            excluded.push(c);
            continue;
        }
        let members: Vec<&[f64]> = rows.iter().map(|&i| test.vectors[i].as_slice()).collect();
        let center = mean_vec(&members)?;
        let m = model.net.apply_many(&members)?;
        for (v, mv) in members.iter().zip(&m) {
            let r: Vec<f64> = mv
                .iter()
                .zip(v.iter())
                .map(|(a, b)| 0.5 * a + 0.5 * b)
                .collect();
            raw += euclidean(v, &center)?;
            transformed += euclidean(mv, &center)?;
            restored += euclidean(&r, &center)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty(
            "test records with a well-defined class center",
        ));
    }
    let n_f = n as f64;
    Ok(DistanceStats {
        n_records: n,
        excluded_classes: excluded,
        raw: raw / n_f,
        transformed: transformed / n_f,
        restored: restored / n_f,
    })
}

/// A vector to place in a projection next to the samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub class_id: u32,
    pub vector: Vec<f64>,
    pub tag: PlotTag,
}

impl Marker {
    pub fn from_prototype(p: &Prototype) -> Self {
        let tag = match p.source {
            PrototypeSource::Raw | PrototypeSource::Refined => PlotTag::Prototype,
            PrototypeSource::Restored | PrototypeSource::RefinedRestored => PlotTag::Restored,
        };
        Marker {
            class_id: p.class_id,
            vector: p.vector.clone(),
            tag,
        }
    }
}

/// PCA of samples ∪ markers; samples first, then markers in the given order.
pub fn project(data: &LabeledSet, markers: &[Marker]) -> Result<Vec<PlotPoint>> {
    let mut all: Vec<&[f64]> = data.vectors.iter().map(|v| v.as_slice()).collect();
    all.extend(markers.iter().map(|m| m.vector.as_slice()));
    let coords = pca2d(&all)?;
    let tags = data
        .labels
        .iter()
        .map(|&c| (c, PlotTag::Sample))
        .chain(markers.iter().map(|m| (m.class_id, m.tag)));
    Ok(coords
        .into_iter()
        .zip(tags)
        .map(|([x, y], (class_id, tag))| PlotPoint {
            x,
            y,
            class_id,
            tag,
        })
        .collect())
}

pub fn emit_projection(
    data: &LabeledSet,
    markers: &[Marker],
    path: &Path,
) -> Result<Vec<PlotPoint>> {
    let points = project(data, markers)?;
    write_plot_data(path, &points)?;
    Ok(points)
}
