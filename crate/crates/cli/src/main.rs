use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use protorest::embedtrain::{train_embedding, DualLossConfig, EmbedConfig, EpisodeSpec};
use protorest::evalharness::{
    distance_stats, emit_projection, format_lambda_table, format_nway_table, lambda_sweep,
    nway_sweep, paired_difference, run_eval, EvalConfig, Marker, Variant,
};
use protorest::featstore::{
    load_bank, save_bank, view_split, FeatureBank, FeatureRecord, LabeledSet, Split,
};
use protorest::neural::{load_checkpoint, save_checkpoint, DenseNet2, LrSchedule, TrainConfig};
use protorest::numerics::{mean_vec, PlotTag, RngStream};
use protorest::protocore::{Prototype, PrototypeSource};
use protorest::restorenet::{
    collect_pairs, compute_targets, restore, train_restore, write_pair_dump, RestoreModel,
};
use protorest::selftrain::PoolMode;
use protorest::synthgen::{generate, oracle_path, write_oracle, SynthSpec};

const FULL_SCALE: &str = "\
Full-scale settings (512-d ResNet18 features of a real image dataset):
  train-embed    --n-way 30 --k-shot 1 --queries 10 --episodes-per-epoch 600
                 --lr 1e-3 --halve-every 20 --hidden 512 --out-dim 512 --head-hidden 256
  train-restore  --hidden 256 --lr 1e-3 --lambda 100 (tune on the val split;
                 30 / 5 / 1 suit smaller classes)
  eval           --episodes 10000 --queries 30 --gamma 4
  sweep-lambda   --lambdas 100,200,300,400,500,600
  sweep-nway     --ways 5,10,15,20
Defaults below are the 64-d synthetic desk benchmark.";

#[derive(Parser, Debug)]
#[command(name = "protorest", version, about = "Few-shot prototype restoration toolkit", after_help = FULL_SCALE)]
struct Cli {
    /// Master seed; fixes all randomness of the subcommand.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,

    /// Default directory for outputs not given explicitly.
    #[arg(long, global = true, env = "PROTOREST_OUT", default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Gaussian-cluster bank with outliers.
    GenSynth(GenSynthArgs),
    /// Train an embedding on the base split.
    TrainEmbed(TrainEmbedArgs),
    /// Apply an embedding to every record of a bank.
    Embed(EmbedArgs),
    /// Train a restoration model on the base split.
    TrainRestore(TrainRestoreArgs),
    /// Evaluate one variant on episodes from a split.
    Eval(EvalArgs),
    /// Baseline vs restore for several N-way settings.
    SweepNway(SweepNwayArgs),
    /// Train and evaluate one restoration model per lambda.
    SweepLambda(SweepLambdaArgs),
    /// Mean distances of p, M(p), R(p) to class centers.
    Stats(StatsArgs),
    /// 2-d projection of samples, prototypes, restored prototypes and centers.
    Project(ProjectArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    cluster_std: f64,
    #[arg(long, default_value_t = 0.85)]
    center_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    outlier_frac: f64,
    #[arg(long, default_value_t = 6.0)]
    outlier_offset: f64,
    /// Class counts for base,val,novel (class-id order).
    #[arg(long, default_value = "9,2,9", value_parser = parse_triple)]
    split: (usize, usize, usize),
    /// Output bank [default: <out-dir>/synth.fbnk].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct BankArg {
    /// Feature bank; its manifest sidecar must sit next to it.
    #[arg(long)]
    bank: PathBuf,
}

#[derive(Args, Debug)]
struct TrainEmbedArgs {
    #[command(flatten)]
    bank: BankArg,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    #[arg(long, default_value_t = 10)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    episodes_per_epoch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    halve_every: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// Embedding width [default: input width].
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long, default_value_t = 256)]
    head_hidden: usize,
    #[arg(long, default_value_t = 1.0)]
    w_proto: f64,
    #[arg(long, default_value_t = 1.0)]
    w_cls: f64,
    /// Output checkpoint [default: <out-dir>/embed.ckpt].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    #[command(flatten)]
    bank: BankArg,
    /// Embedding checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Output bank [default: <out-dir>/embedded.fbnk].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainRestoreArgs {
    #[command(flatten)]
    bank: BankArg,
    #[arg(long, default_value_t = 60)]
    lambda: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Also write the mined pairs as `class_id,rank,distance`.
    #[arg(long)]
    dump_pairs: Option<PathBuf>,
    /// Output checkpoint [default: <out-dir>/restore.ckpt]; the loss log goes next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct EvalOpts {
    #[command(flatten)]
    bank: BankArg,
    #[arg(long, default_value = "novel")]
    split: Split,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Query images per class.
    #[arg(long, default_value_t = 30)]
    queries: usize,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    #[arg(long, default_value_t = 4)]
    gamma: usize,
    /// external | leave-one-out | shared
    #[arg(long, default_value = "external")]
    pool_mode: PoolMode,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    opts: EvalOpts,
    /// baseline | restore | self | self_restore
    #[arg(long, default_value = "baseline")]
    variant: Variant,
    /// Restoration checkpoint (restore and self_restore).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Report file [default: <out-dir>/eval_<variant>.txt].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-episode CSV.
    #[arg(long)]
    per_episode: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepNwayArgs {
    #[command(flatten)]
    opts: EvalOpts,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,7,9")]
    ways: Vec<usize>,
    /// Table file [default: <out-dir>/sweep_nway.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepLambdaArgs {
    #[command(flatten)]
    opts: EvalOpts,
    #[arg(long, value_delimiter = ',', default_value = "60,200")]
    lambdas: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Compare self vs self_restore instead of baseline vs restore.
    #[arg(long)]
    self_training: bool,
    /// Table file [default: <out-dir>/sweep_lambda.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    bank: BankArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "novel")]
    split: Split,
    /// Output file [default: <out-dir>/distance_stats.txt].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProjectArgs {
    #[command(flatten)]
    bank: BankArg,
    #[arg(long, default_value = "novel")]
    split: Split,
    /// Restoration checkpoint; adds restored prototypes.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of classes to plot (lowest ids of the split).
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Support size of the plotted prototypes.
    #[arg(long, default_value_t = 1)]
    k_shot: usize,
    /// Plot-data file [default: <out-dir>/projection.csv].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_triple(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(format!("expected three comma-separated counts, got {s:?}")),
    }
}

fn output(explicit: &Option<PathBuf>, out_dir: &Path, default_name: &str) -> Result<PathBuf> {
    let path = explicit
        .clone()
        .unwrap_or_else(|| out_dir.join(default_name));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

fn labeled(bank: &FeatureBank, split: Split) -> Result<LabeledSet> {
    let view = view_split(bank, split);
    if view.is_empty() {
        bail!("split {split} of the bank has no records");
    }
    Ok(view.to_labeled())
}

fn load_restore(path: &Path) -> Result<RestoreModel> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(RestoreModel::from_checkpoint(ckpt)?)
}

fn eval_config(opts: &EvalOpts, variant: Variant, seed: u64) -> EvalConfig {
    EvalConfig {
        episode: EpisodeSpec {
            n_way: opts.n_way,
            k_shot: opts.k_shot,
            q_queries: opts.queries,
        },
        n_episodes: opts.episodes,
        variant,
        gamma: opts.gamma,
        pool_mode: opts.pool_mode,
        seed,
        jobs: opts.jobs,
        model_label: None,
    }
}

fn restore_train_config(epochs: usize, batch: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        batch_size: batch,
        schedule: LrSchedule::Fixed,
        seed,
    }
}

fn run(cli: Cli) -> Result<()> {
    info!("resolved config: {cli:?}");
    let seed = cli.seed;
    match &cli.command {
        Command::GenSynth(a) => {
            let spec = SynthSpec {
                n_classes: a.classes,
                dim: a.dim,
                per_class: a.per_class,
                cluster_std: a.cluster_std,
                center_scale: a.center_scale,
                outlier_frac: a.outlier_frac,
                outlier_offset: a.outlier_offset,
                split_counts: a.split,
                seed,
            };
            let path = output(&a.out, &cli.out_dir, "synth.fbnk")?;
            let synth = generate(&spec)?;
            save_bank(&synth.bank, &path)?;
            write_oracle(&synth, &oracle_path(&path))?;
            println!(
                "wrote {} ({} records)",
                path.display(),
                synth.bank.records.len()
            );
        }
        Command::TrainEmbed(a) => {
            let bank = load_bank(&a.bank.bank)?;
            let base = labeled(&bank, Split::Base)?;
            let cfg = EmbedConfig {
                episode: EpisodeSpec::new(a.n_way, a.k_shot, a.queries)?,
                episodes_per_epoch: a.episodes_per_epoch,
                loss: DualLossConfig {
                    w_proto: a.w_proto,
                    w_cls: a.w_cls,
                },
                hidden_dim: a.hidden,
                out_dim: a.out_dim,
                head_hidden: a.head_hidden,
                train: TrainConfig {
                    lr: a.lr,
                    epochs: a.epochs,
                    batch_size: 1,
                    schedule: LrSchedule::HalveEvery(a.halve_every),
                    seed,
                },
            };
            info!("embedding config: {}", cfg.describe());
            let trained = train_embedding(&base, &cfg)?;
            let path = output(&a.out, &cli.out_dir, "embed.ckpt")?;
            save_checkpoint(&trained.to_checkpoint(), &path)?;
            let log_path = path.with_extension("loss.csv");
            fs::write(
                &log_path,
                format!("epoch,episode,loss\n{}", trained.log_text()),
            )
            .with_context(|| format!("writing {}", log_path.display()))?;
            if let (Some(first), Some(last)) =
                (trained.epoch_means.first(), trained.epoch_means.last())
            {
                println!("epoch loss {first:.4} -> {last:.4}");
            }
            println!("wrote {} and {}", path.display(), log_path.display());
        }
        Command::Embed(a) => {
            let bank = load_bank(&a.bank.bank)?;
            let ckpt = load_checkpoint(&a.model)
                .with_context(|| format!("loading {}", a.model.display()))?;
            let net: DenseNet2 = ckpt.net;
            let records = bank
                .records
                .iter()
                .map(|r| {
                    let v: Vec<f64> = r.vector.iter().map(|&x| x as f64).collect();
                    Ok(FeatureRecord {
                        class_id: r.class_id,
                        vector: net.apply(&v)?.into_iter().map(|x| x as f32).collect(),
                    })
                })
                .collect::<protorest::Result<Vec<_>>>()?;
            let mut manifest = bank.manifest.clone();
            manifest.provenance = format!(
                "{}; embedded with {}",
                manifest.provenance,
                a.model.display()
            );
            let out = FeatureBank::new(net.out_dim(), records, manifest)?;
            let path = output(&a.out, &cli.out_dir, "embedded.fbnk")?;
            save_bank(&out, &path)?;
            println!("wrote {} (dim {})", path.display(), out.dim);
        }
        Command::TrainRestore(a) => {
            let bank = load_bank(&a.bank.bank)?;
            let base = labeled(&bank, Split::Base)?;
            let targets = compute_targets(&base)?;
            let pairs = collect_pairs(&base, &targets, a.lambda)?;
            if let Some(p) = &a.dump_pairs {
                write_pair_dump(&pairs, p)?;
            }
            let train = restore_train_config(a.epochs, a.batch, a.lr, seed);
            info!(
                "restoration: {} pairs, hidden {}, {}",
                pairs.len(),
                a.hidden,
                train.describe()
            );
            let trained = train_restore(&pairs, a.hidden, &train)?;
            let path = output(&a.out, &cli.out_dir, "restore.ckpt")?;
            save_checkpoint(&trained.model.to_checkpoint(), &path)?;
            let log_path = path.with_extension("loss.csv");
            let log: String = trained
                .epoch_losses
                .iter()
                .enumerate()
                .map(|(e, l)| format!("{e},{l}\n"))
                .collect();
            fs::write(&log_path, format!("epoch,loss\n{log}"))
                .with_context(|| format!("writing {}", log_path.display()))?;
            println!("wrote {} and {}", path.display(), log_path.display());
        }
        Command::Eval(a) => {
            let bank = load_bank(&a.opts.bank.bank)?;
            let data = labeled(&bank, a.opts.split)?;
            let model = match (&a.model, a.variant) {
                (Some(p), _) => Some(load_restore(p)?),
                (None, v) if v.needs_model() => bail!("variant {v} needs --model"),
                _ => None,
            };
            let mut cfg = eval_config(&a.opts, a.variant, seed);
            cfg.model_label = a.model.as_ref().map(|p| p.display().to_string());
            let report = run_eval(&data, &cfg, model.as_ref())?;
            let path = output(&a.out, &cli.out_dir, &format!("eval_{}.txt", a.variant))?;
            report.write(&path)?;
            if let Some(p) = &a.per_episode {
                report.write_per_episode(p)?;
            }
            println!("{} {}", a.variant, report.summary());
        }
        Command::SweepNway(a) => {
            let bank = load_bank(&a.opts.bank.bank)?;
            let data = labeled(&bank, a.opts.split)?;
            let model = load_restore(&a.model)?;
            let mut template = eval_config(&a.opts, Variant::Baseline, seed);
            template.model_label = Some(a.model.display().to_string());
            let rows = nway_sweep(&data, &a.ways, &template, &model)?;
            let table = format_nway_table(&rows);
            let path = output(&a.out, &cli.out_dir, "sweep_nway.csv")?;
            fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            print!("{table}");
            for r in &rows {
                let (d, h) = paired_difference(&r.baseline, &r.restore)?;
                info!("{}-way paired difference {d:.2}±{h:.2}", r.n_way);
            }
        }
        Command::SweepLambda(a) => {
            let bank = load_bank(&a.opts.bank.bank)?;
            let base = labeled(&bank, Split::Base)?;
            let data = labeled(&bank, a.opts.split)?;
            let variant = if a.self_training {
                Variant::SelfTrain
            } else {
                Variant::Baseline
            };
            let train = restore_train_config(a.epochs, a.batch, a.lr, seed);
            let rows = lambda_sweep(
                &base,
                &data,
                &a.lambdas,
                a.hidden,
                &train,
                &eval_config(&a.opts, variant, seed),
            )?;
            let table = format_lambda_table(&rows);
            let path = output(&a.out, &cli.out_dir, "sweep_lambda.csv")?;
            fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            print!("{table}");
        }
        Command::Stats(a) => {
            let bank = load_bank(&a.bank.bank)?;
            let data = labeled(&bank, a.split)?;
            let stats = distance_stats(&data, &load_restore(&a.model)?)?;
            let path = output(&a.out, &cli.out_dir, "distance_stats.txt")?;
            fs::write(&path, stats.to_text())
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{}", stats.to_text());
        }
        Command::Project(a) => {
            let bank = load_bank(&a.bank.bank)?;
            let all = labeled(&bank, a.split)?;
            let model = a.model.as_deref().map(load_restore).transpose()?;
            let by_class = all.by_class();
            if by_class.len() < a.classes {
                bail!(
                    "split {} has {} classes, {} requested",
                    a.split,
                    by_class.len(),
                    a.classes
                );
            }
            let mut rng = RngStream::new(seed, 0x9e0);
            let (mut vectors, mut labels, mut markers) = (Vec::new(), Vec::new(), Vec::new());
            for (&c, rows) in by_class.iter().take(a.classes) {
                if rows.len() < a.k_shot {
                    bail!(
                        "class {c} has {} records, fewer than --k-shot {}",
                        rows.len(),
                        a.k_shot
                    );
                }
                let members: Vec<&[f64]> =
                    rows.iter().map(|&i| all.vectors[i].as_slice()).collect();
                let support: Vec<&[f64]> = rng
                    .sample_indices(rows.len(), a.k_shot)
                    .into_iter()
                    .map(|i| members[i])
                    .collect();
                let proto = Prototype {
                    class_id: c,
                    vector: mean_vec(&support)?,
                    source: PrototypeSource::Raw,
                };
                markers.push(Marker::from_prototype(&proto));
                if let Some(m) = &model {
                    markers.push(Marker::from_prototype(&restore(m, &proto)?));
                }
                markers.push(Marker {
                    class_id: c,
                    vector: mean_vec(&members)?,
                    tag: PlotTag::Center,
                });
                vectors.extend(members.iter().map(|v| v.to_vec()));
                labels.extend(std::iter::repeat_n(c, members.len()));
            }
            let subset = LabeledSet::new(all.dim, vectors, labels)?;
            let path = output(&a.out, &cli.out_dir, "projection.csv")?;
            let points = emit_projection(&subset, &markers, &path)?;
            println!("wrote {} ({} points)", path.display(), points.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
