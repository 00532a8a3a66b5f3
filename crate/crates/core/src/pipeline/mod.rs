//! End-to-end pipeline: supernet training with per-step random groups,
//! evolutionary search on the trained supernet, retraining from scratch with
//! the searched groups, and evaluation — plus the persistence glue
//! (checkpoints, metrics CSV, genome and history files) the CLI exposes.

mod checkpoint;
mod config;
mod data;

pub use checkpoint::{BnRecord, Checkpoint, ParamRecord};
pub use config::{
    read_genome_file, write_genome_file, DatasetSection, NetworkSection, PipelineSection,
    RunConfig, SearchSection, TrainSection, DEFAULT_BUDGET_FRACTION,
};
pub use data::{
    load_dataset, load_idx_images, load_idx_labels, write_idx_images, write_idx_labels, Dataset,
    DatasetSplit, SplitTag, VAL_SIZE,
};

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::arch::{flops, GroupNet, GroupVector, NetworkConfig, SharedWeightStore};
use crate::error::{Error, Result};
use crate::evolve::{evolve, SearchOutcome, SearchSpace};
use crate::rng::NamedRng;
use crate::tensor::Tensor4;
use crate::train::{softmax_cross_entropy, Phase};

/// Fitness evaluates the supernet on this many held-out samples.
pub const FITNESS_SUBSET: usize = 1024;
/// One batch-norm recalibration batch per genome.
pub const CALIB_BATCH: usize = 256;
/// Batch size used for plain evaluation loops. Large batches amortize the
/// per-forward weight preparation.
const EVAL_BATCH: usize = 1024;

pub const SUPERNET_CKPT: &str = "supernet.ckpt";
pub const RETRAIN_CKPT: &str = "retrain.ckpt";
pub const SUPERNET_METRICS: &str = "supernet_metrics.csv";
pub const RETRAIN_METRICS: &str = "retrain_metrics.csv";
pub const SEARCH_HISTORY: &str = "search_history.csv";
pub const BEST_GENOME: &str = "best_genome.txt";

/// A run's loaded state: config, dataset, derived architecture.
pub struct StageContext {
    pub run: RunConfig,
    pub dataset: Dataset,
    pub net_config: NetworkConfig,
    pub deterministic: bool,
}

impl StageContext {
    pub fn new(run: RunConfig, deterministic: bool) -> Result<Self> {
        run.validate()?;
        let dataset = load_dataset(&run.dataset.name, &run.dataset.path, run.seed)?;
        let net_config = run.network_config(dataset.input, dataset.num_classes)?;
        std::fs::create_dir_all(&run.out_dir)
            .map_err(|e| Error::config(format!("cannot create out dir {:?}: {e}", run.out_dir)))?;
        Ok(StageContext {
            run,
            dataset,
            net_config,
            deterministic,
        })
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.run.out_dir.join(name)
    }
}

/// Count of rows whose true label ranks inside the top-k logits. Ties are
/// broken toward the smaller class index so the count is deterministic.
fn topk_count(logits: &Tensor4<f32>, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape().c;
    let k = k.min(classes);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let lv = row[label];
            let rank = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > lv || (v == lv && j < label))
                .count();
            rank < k
        })
        .count()
}

/// Top-1/top-5 accuracy of a network under a fixed genome over (a prefix of)
/// a split. Deterministic; batch-norm running statistics are used as-is.
pub fn evaluate_split(
    net: &mut GroupNet<f32>,
    store: &SharedWeightStore<f32>,
    genome: &GroupVector,
    split: &DatasetSplit,
    limit: Option<usize>,
) -> (f64, f64) {
    let n = limit.unwrap_or(split.len()).min(split.len());
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    let mut at = 0usize;
    while at < n {
        let idx: Vec<usize> = (at..(at + EVAL_BATCH).min(n)).collect();
        let (x, labels) = split.gather(&idx);
        let logits = net.forward(&x, store, genome, Phase::Eval);
        top1 += topk_count(&logits, &labels, 1);
        top5 += topk_count(&logits, &labels, 5);
        at += idx.len();
    }
    (top1 as f64 / n as f64, top5 as f64 / n as f64)
}

/// Supernet fitness: clone the network, recalibrate batch-norm statistics on
/// one fixed batch under the genome's crops, then measure top-1 accuracy on
/// the fixed validation subset. Deterministic per (weights, genome).
pub struct FitnessEvaluator {
    net: GroupNet<f32>,
    calib_x: Tensor4<f32>,
    val: DatasetSplit,
    subset: usize,
}

impl FitnessEvaluator {
    pub fn new(net: GroupNet<f32>, dataset: &Dataset) -> Self {
        let (calib_x, _) = dataset.train.head(CALIB_BATCH);
        FitnessEvaluator {
            net,
            calib_x,
            val: dataset.val.clone(),
            subset: FITNESS_SUBSET.min(dataset.val.len()),
        }
    }

    pub fn fitness(&self, store: &SharedWeightStore<f32>, genome: &GroupVector) -> f64 {
        let mut net = self.net.clone();
        net.reset_bn_stats();
        let _ = net.forward(&self.calib_x, store, genome, Phase::Calibrate);
        let (top1, _) = evaluate_split(&mut net, store, genome, &self.val, Some(self.subset));
        top1
    }

    /// Evaluates a batch of genomes, in parallel over read-only weights.
    pub fn batch(&self, store: &SharedWeightStore<f32>, genomes: &[GroupVector]) -> Vec<f64> {
        genomes
            .par_iter()
            .map(|g| self.fitness(store, g))
            .collect()
    }
}

struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let exists = path.exists();
        let mut opts = std::fs::OpenOptions::new();
        if append && exists {
            opts.append(true);
        } else {
            opts.write(true).create(true).truncate(true);
        }
        let mut file = opts
            .open(path)
            .map_err(|e| Error::data(format!("cannot open metrics {}: {e}", path.display())))?;
        if !(append && exists) {
            writeln!(file, "epoch,lr,train_loss,train_top1,val_top1,val_top5,wall_seconds")
                .map_err(|e| Error::data(format!("metrics write failed: {e}")))?;
        }
        Ok(MetricsWriter { file })
    }

    #[allow(clippy::too_many_arguments)]
    fn row(
        &mut self,
        epoch: usize,
        lr: f64,
        loss: f64,
        top1: f64,
        val1: f64,
        val5: f64,
        wall: f64,
    ) -> Result<()> {
        writeln!(
            self.file,
            "{epoch},{lr},{loss},{top1},{val1},{val5},{wall:.3}"
        )
        .map_err(|e| Error::data(format!("metrics write failed: {e}")))
    }
}

fn random_genome(space: &SearchSpace, rng: &mut NamedRng) -> GroupVector {
    GroupVector(
        space
            .slot_candidates
            .iter()
            .map(|c| c[rng.gen_range(0..c.len())])
            .collect(),
    )
}

struct TrainOutcome {
    net: GroupNet<f32>,
    store: SharedWeightStore<f32>,
}

/// The shared epoch loop. With `fixed_genome = None` a fresh random group
/// vector is drawn per mini-batch step (supernet mode); otherwise every step
/// uses the given genome (retrain mode).
#[allow(clippy::too_many_arguments)]
fn train_loop(
    ctx: &StageContext,
    epochs: usize,
    upto: Option<usize>,
    fixed_genome: Option<&GroupVector>,
    resume: Option<&Path>,
    ckpt_path: &Path,
    metrics_path: &Path,
    prefix: &str,
) -> Result<TrainOutcome> {
    let train_n = ctx.dataset.train.len();
    let batch = ctx.run.train.batch_size;
    let steps_per_epoch = train_n.div_ceil(batch);
    let total_steps = (epochs * steps_per_epoch) as u64;
    let tc = ctx.run.train_config(total_steps);
    tc.validate()?;
    let seed = ctx.run.seed;

    let data_stream = format!("{prefix}.data");
    let groups_stream = format!("{prefix}.groups");

    let (mut net, mut store, mut data_rng, mut groups_rng, mut step, start_epoch) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.config != ctx.net_config {
                return Err(Error::config(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                )));
            }
            let data_rng = ckpt
                .rng_state(&data_stream)
                .map(NamedRng::restore)
                .ok_or_else(|| Error::data(format!("checkpoint lacks rng stream {data_stream}")))?;
            let groups_rng = ckpt
                .rng_state(&groups_stream)
                .map(NamedRng::restore)
                .ok_or_else(|| Error::data(format!("checkpoint lacks rng stream {groups_stream}")))?;
            let epoch = ckpt.epoch as usize;
            let step = ckpt.step;
            let (net, store) = ckpt.restore()?;
            (net, store, data_rng, groups_rng, step, epoch)
        }
        None => {
            let mut init = NamedRng::new(seed, &format!("{prefix}.init"));
            let (net, store) = GroupNet::new(&ctx.net_config, &mut init)?;
            (
                net,
                store,
                NamedRng::new(seed, &data_stream),
                NamedRng::new(seed, &groups_stream),
                0u64,
                0usize,
            )
        }
    };

    let space = SearchSpace::of_config(&ctx.net_config);
    let eval_genome = fixed_genome
        .cloned()
        .unwrap_or_else(|| GroupVector::all_ones(ctx.net_config.num_slots()));
    let mut metrics = MetricsWriter::open(metrics_path, resume.is_some())?;

    let end_epoch = upto.map_or(epochs, |u| u.min(epochs));
    for epoch in start_epoch..end_epoch {
        let started = Instant::now();
        let lr_now = tc.lr_at(step);
        let mut order: Vec<usize> = (0..train_n).collect();
        order.shuffle(&mut data_rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for chunk in order.chunks(batch) {
            // Batch norm needs at least two samples; a singleton remainder
            // batch is skipped.
            if chunk.len() == 1 {
                continue;
            }
            let genome = match fixed_genome {
                Some(g) => g.clone(),
                None => random_genome(&space, &mut groups_rng),
            };
            let (x, labels) = ctx.dataset.train.gather(chunk);
            let logits = net.forward(&x, &store, &genome, Phase::Train { smooth: false });
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            net.zero_grads(&mut store);
            net.backward(&dlogits, &mut store, &genome);
            net.adam_step_all(&mut store, &tc, step);
            loss_sum += f64::from(loss) * labels.len() as f64;
            correct += topk_count(&logits, &labels, 1);
            seen += labels.len();
            step += 1;
        }

        let train_loss = loss_sum / seen as f64;
        let train_top1 = correct as f64 / seen as f64;
        let (val1, val5) = evaluate_split(&mut net, &store, &eval_genome, &ctx.dataset.val, None);
        let wall = if ctx.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        metrics.row(epoch + 1, lr_now, train_loss, train_top1, val1, val5, wall)?;
        eprintln!(
            "[{prefix}] epoch {}/{} loss {train_loss:.4} top1 {train_top1:.4} \
             val {val1:.4}/{val5:.4} ({:.1}s)",
            epoch + 1,
            epochs,
            started.elapsed().as_secs_f64()
        );

        let rngs = vec![
            (data_stream.clone(), data_rng.state()),
            (groups_stream.clone(), groups_rng.state()),
        ];
        let ckpt = Checkpoint::capture(
            &mut net,
            &store,
            fixed_genome,
            step,
            (epoch + 1) as u64,
            rngs,
        );
        ckpt.save(ckpt_path)?;
    }

    Ok(TrainOutcome { net, store })
}

/// Trains the weight-sharing supernet: a fresh uniform random group vector
/// per mini-batch step. Returns the checkpoint path.
pub fn train_supernet(ctx: &StageContext, resume: Option<&Path>) -> Result<PathBuf> {
    train_supernet_until(ctx, resume, None)
}

/// Like [`train_supernet`] but stops after `upto` epochs of the configured
/// schedule (learning-rate decay still spans the full schedule). Resuming
/// from the written checkpoint continues exactly where the session stopped.
pub fn train_supernet_until(
    ctx: &StageContext,
    resume: Option<&Path>,
    upto: Option<usize>,
) -> Result<PathBuf> {
    let ckpt_path = ctx.artifact(SUPERNET_CKPT);
    let metrics_path = ctx.artifact(SUPERNET_METRICS);
    train_loop(
        ctx,
        ctx.run.pipeline.supernet_epochs,
        upto,
        None,
        resume,
        &ckpt_path,
        &metrics_path,
        "supernet",
    )?;
    Ok(ckpt_path)
}

/// Runs the evolutionary search against a trained supernet checkpoint.
/// Writes the best genome and the per-iteration history; returns the genome
/// and the search outcome.
pub fn search(ctx: &StageContext, supernet_ckpt: &Path) -> Result<(GroupVector, SearchOutcome)> {
    let ckpt = Checkpoint::load(supernet_ckpt)?;
    if ckpt.config != ctx.net_config {
        return Err(Error::config(format!(
            "supernet checkpoint {} does not match the run's architecture",
            supernet_ckpt.display()
        )));
    }
    let (net, store) = ckpt.restore()?;
    let evaluator = FitnessEvaluator::new(net, &ctx.dataset);
    let space = SearchSpace::of_config(&ctx.net_config);
    let search_cfg = ctx.run.search_config(&ctx.net_config);
    let net_config = ctx.net_config.clone();

    let outcome = evolve(
        &search_cfg,
        &space,
        |g| flops(&net_config, g),
        |genomes| Ok(evaluator.batch(&store, genomes)),
    )?;

    let history_path = ctx.artifact(SEARCH_HISTORY);
    let mut text = String::from("iteration,best_fitness,mean_fitness,best_genome,best_flops\n");
    for row in &outcome.history {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.iteration, row.best_fitness, row.mean_fitness, row.best_genome, row.best_flops
        ));
    }
    std::fs::write(&history_path, text)
        .map_err(|e| Error::data(format!("cannot write history {}: {e}", history_path.display())))?;
    write_genome_file(&ctx.artifact(BEST_GENOME), &outcome.best.genome)?;

    eprintln!(
        "[search] best fitness {:.4} at {:.3e} FLOPs (budget {:.3e})",
        outcome.best.fitness, outcome.best.flops, search_cfg.flop_budget
    );
    Ok((outcome.best.genome.clone(), outcome))
}

/// Retrains the searched genome from scratch and evaluates on the test set.
/// Returns the checkpoint path and (top-1, top-5) test accuracy.
pub fn retrain(
    ctx: &StageContext,
    genome: &GroupVector,
    resume: Option<&Path>,
) -> Result<(PathBuf, f64, f64)> {
    ctx.net_config.validate_genome(genome)?;
    let ckpt_path = ctx.artifact(RETRAIN_CKPT);
    let metrics_path = ctx.artifact(RETRAIN_METRICS);
    let mut outcome = train_loop(
        ctx,
        ctx.run.pipeline.retrain_epochs,
        None,
        Some(genome),
        resume,
        &ckpt_path,
        &metrics_path,
        "retrain",
    )?;
    let (top1, top5) = evaluate_split(
        &mut outcome.net,
        &outcome.store,
        genome,
        &ctx.dataset.test,
        None,
    );
    eprintln!("[retrain] test top1 {top1:.4} top5 {top5:.4}");
    Ok((ckpt_path, top1, top5))
}

/// Evaluates a checkpoint on a dataset split. Supernet checkpoints (no
/// stored genome) need an explicit genome.
pub fn evaluate_checkpoint(
    ctx: &StageContext,
    ckpt_path: &Path,
    genome_override: Option<GroupVector>,
    split: SplitTag,
) -> Result<(f64, f64)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    if ckpt.config.num_classes != ctx.dataset.num_classes {
        return Err(Error::config(format!(
            "checkpoint has {} classes, dataset {} has {}",
            ckpt.config.num_classes, ctx.dataset.name, ctx.dataset.num_classes
        )));
    }
    if ckpt.config.input != ctx.dataset.input {
        return Err(Error::config(format!(
            "checkpoint expects input {:?}, dataset provides {:?}",
            ckpt.config.input, ctx.dataset.input
        )));
    }
    let genome = match genome_override.or(ckpt.genome.clone()) {
        Some(g) => g,
        None => {
            return Err(Error::config(
                "checkpoint stores no genome; pass one with --genome".to_string(),
            ))
        }
    };
    ckpt.config.validate_genome(&genome)?;
    let (mut net, store) = ckpt.restore()?;
    let split = match split {
        SplitTag::Train => &ctx.dataset.train,
        SplitTag::Val => &ctx.dataset.val,
        SplitTag::Test => &ctx.dataset.test,
    };
    Ok(evaluate_split(&mut net, &store, &genome, split, None))
}

/// Result of the full three-stage run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub genome: GroupVector,
    pub genome_flops: f64,
    pub flop_budget: f64,
    pub search_best_fitness: f64,
    pub test_top1: f64,
    pub test_top5: f64,
}

/// The whole pipeline in one call: supernet → search → retrain → evaluate.
pub fn run_all(ctx: &StageContext) -> Result<RunSummary> {
    let supernet_ckpt = train_supernet(ctx, None)?;
    let (genome, outcome) = search(ctx, &supernet_ckpt)?;
    let (_, top1, top5) = retrain(ctx, &genome, None)?;
    let summary = RunSummary {
        genome_flops: flops(&ctx.net_config, &genome),
        flop_budget: ctx.run.search_config(&ctx.net_config).flop_budget,
        search_best_fitness: outcome.best.fitness,
        genome,
        test_top1: top1,
        test_top5: top5,
    };
    let text = format!(
        "genome={}\ngenome_flops={}\nflop_budget={}\nsearch_best_fitness={}\ntest_top1={}\ntest_top5={}\n",
        summary.genome,
        summary.genome_flops,
        summary.flop_budget,
        summary.search_best_fitness,
        summary.test_top1,
        summary.test_top5
    );
    let path = ctx.artifact("summary.txt");
    std::fs::write(&path, text)
        .map_err(|e| Error::data(format!("cannot write summary {}: {e}", path.display())))?;
    Ok(summary)
}
