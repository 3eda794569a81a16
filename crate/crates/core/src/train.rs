//! Training and evaluation loops wiring the model, selectors, forgetting
//! tracker, subset manager and MAC accounting together.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use trilevel_tensor::parallel::{threads_from_env, with_threads};
use trilevel_tensor::{AdamW, Float, LrSchedule, Tape};

use crate::checkpoint;
use crate::config::{DatasetKind, Precision, RemovalPolicy, RunConfig, SparsityConfig};
use crate::data::{default_augment, load_dataset, Augment, Dataset};
use crate::error::{CoreError, Result};
use crate::forgetting::{attention_statistic, ForgettingTracker};
use crate::macs::{cost_report, CostReport};
use crate::model::{argmax_rows, ViT};
use crate::subset::{random_ranking, SubsetState};

pub const MIN_LR: f64 = 1e-5;
pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,val_acc,live_tokens,effective_r_t,active_size,epoch_macs";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Run the plain dense forward pass regardless of the sparsity ratios.
    pub dense_only: bool,
    /// Kernel threads; `None` reads `TRILEVEL_THREADS`.
    pub threads: Option<usize>,
    /// Skip writing files under `out_dir`.
    pub no_outputs: bool,
    /// Print each epoch's metrics row to stderr.
    pub progress: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Live tokens (with `[CLS]`) entering layer 1 and each selector layer.
    pub live_tokens: Vec<usize>,
    pub effective_r_t: f64,
    pub active_size: usize,
    /// Instrumented forward MACs of the epoch's training steps.
    pub epoch_macs: u128,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let live: Vec<String> = self.live_tokens.iter().map(usize::to_string).collect();
        format!(
            "{},{:.6},{:.6},{:.6},{},{:.6},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            self.val_acc,
            live.join(";"),
            self.effective_r_t,
            self.active_size,
            self.epoch_macs
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub metrics: Vec<EpochMetrics>,
    pub final_val_acc: f64,
    pub training_macs: u128,
    pub subset_log: Vec<String>,
    pub analytic: CostReport,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
struct RunCost<'a> {
    analytic: &'a CostReport,
    instrumented_training_forward_macs: u128,
}

/// Top-1 accuracy of `model` on `data`.
pub fn evaluate<F: Float>(
    model: &ViT<F>,
    data: &Dataset,
    sparsity: Option<&SparsityConfig>,
    epoch: usize,
    batch_size: usize,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in ids.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<F>(chunk, Augment::None, &mut rng);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &x, sparsity, epoch)?;
        let preds = argmax_rows(tape.value(out.logits));
        correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn check_geometry(run: &RunConfig, data: &Dataset) -> Result<()> {
    let m = &run.model;
    if data.channels != m.channels || data.size != m.image_size || data.classes != m.num_classes {
        return Err(CoreError::Config(format!(
            "dataset is {}x{}x{} with {} classes, model expects {}x{}x{} with {}",
            data.channels,
            data.size,
            data.size,
            data.classes,
            m.channels,
            m.image_size,
            m.image_size,
            m.num_classes
        )));
    }
    Ok(())
}

fn epoch_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Trains per `run`, loading the configured dataset.
pub fn train(run: &RunConfig, opts: &TrainOptions) -> Result<RunSummary> {
    run.validate()?;
    let (tr, te) = load_dataset(&run.dataset, &run.data_dir, run.model.channels, run.model.image_size)?;
    train_on(run, opts, &tr, &te)
}

/// Trains on explicit splits.
pub fn train_on(run: &RunConfig, opts: &TrainOptions, train: &Dataset, test: &Dataset) -> Result<RunSummary> {
    run.validate()?;
    check_geometry(run, train)?;
    check_geometry(run, test)?;
    let threads = opts.threads.unwrap_or_else(threads_from_env);
    with_threads(threads, || match run.precision {
        Precision::F32 => train_impl::<f32>(run, opts, train, test),
        Precision::F64 => train_impl::<f64>(run, opts, train, test),
    })
}

fn train_impl<F: Float>(
    run: &RunConfig,
    opts: &TrainOptions,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunSummary> {
    let sp = &run.sparsity;
    let cfg = &run.model;
    let use_cls = cfg.use_cls_token;
    let fwd_sparsity = (!opts.dense_only).then_some(sp);
    let variance_layer = sp.variance_layer_for(cfg.depth);
    let augment = default_augment(&run.dataset);

    let mut model = ViT::<F>::new(cfg, run.seed)?;
    let mut opt = AdamW::<F>::new(run.base_lr, run.weight_decay);
    let schedule = LrSchedule {
        base_lr: run.base_lr,
        warmup_epochs: run.lr_warmup_epochs,
        total_epochs: run.epochs,
        min_lr: MIN_LR,
    };
    let mut tracker = ForgettingTracker::new(train.len());
    let mut subset = SubsetState::init(train.len(), sp.r_e, sp.removal_step_pct, run.seed)?;
    let mut subset_log = vec![format!(
        "init active={} pool={} max_iterations={} digest={}",
        subset.active.len(),
        subset.pool.len(),
        subset.max_iterations,
        subset.digest()
    )];

    if !opts.no_outputs {
        std::fs::create_dir_all(&run.out_dir)?;
    }
    let mut metrics_csv = format!("{METRICS_HEADER}\n");
    let mut timing_csv = String::from("epoch,wall_seconds\n");
    let mut metrics = Vec::with_capacity(run.epochs);
    let mut step = 0usize;
    let mut training_macs = 0u128;

    for epoch in 0..run.epochs {
        let started = Instant::now();
        opt.lr = schedule.at(epoch);
        let mut order = subset.active_ids();
        order.shuffle(&mut epoch_rng(run.seed, 2 * epoch as u64 + 1));
        let mut aug_rng = epoch_rng(run.seed, 2 * epoch as u64 + 2);

        let (mut loss_sum, mut correct, mut epoch_macs) = (0.0f64, 0usize, 0u128);
        let mut live_tokens = Vec::new();
        for chunk in order.chunks(run.batch_size) {
            let (x, y) = train.batch::<F>(chunk, augment, &mut aug_rng);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &x, fwd_sparsity, epoch)?;
            let loss = tape.cross_entropy(out.logits, &y)?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(CoreError::Divergence { epoch, step, loss: lv });
            }
            let preds = argmax_rows(tape.value(out.logits));
            for (i, &id) in chunk.iter().enumerate() {
                let rec = out.record(&tape, variance_layer, i);
                tracker.record(id, preds[i] == y[i], attention_statistic(&rec, use_cls));
            }
            correct += preds.iter().zip(&y).filter(|(p, t)| p == t).count();
            loss_sum += lv * chunk.len() as f64;
            epoch_macs += u128::from(tape.macs().total());
            if live_tokens.is_empty() {
                live_tokens.push(out.live[0][0].len());
                live_tokens.extend(sp.prune_layers.iter().map(|&p| out.live[p - 1][0].len()));
            }

            let grads = tape.backward(loss)?;
            model.params_mut().clear_grads();
            model.params_mut().accumulate(&tape, &grads);
            opt.step(model.params_mut())?;
            step += 1;
        }

        let val_acc = evaluate(&model, test, fwd_sparsity, epoch, run.batch_size)?;
        let completed = epoch + 1;
        if subset.schedule_hook(completed, sp.update_period_epochs) {
            let active = subset.active_ids();
            let ranking = match sp.removal_policy {
                RemovalPolicy::Forgetting => tracker.rank(&active, sp.tiebreak_direction)?,
                RemovalPolicy::Random => random_ranking(&subset.active, run.seed, subset.iteration),
            };
            let rec = subset.remove_and_restore(&ranking, sp.removal_step_pct)?;
            tracker.reset_window();
            subset_log.push(format!(
                "epoch={completed} iteration={} removed={} restored={} digest={}",
                rec.iteration,
                rec.removed.len(),
                rec.restored.len(),
                rec.digest
            ));
        }

        training_macs += epoch_macs;
        let m = EpochMetrics {
            epoch: completed,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_acc,
            live_tokens,
            effective_r_t: if opts.dense_only { 1.0 } else { sp.effective_r_t(epoch) },
            active_size: order.len(),
            epoch_macs,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        metrics_csv.push_str(&m.csv_row());
        metrics_csv.push('\n');
        let _ = writeln!(timing_csv, "{},{:.3}", m.epoch, m.wall_seconds);
        if opts.progress {
            eprintln!("{} ({:.1}s)", m.csv_row(), m.wall_seconds);
        }
        if !opts.no_outputs {
            write_file(&run.out_dir.join("metrics.csv"), &metrics_csv)?;
            write_file(&run.out_dir.join("timing.csv"), &timing_csv)?;
        }
        metrics.push(m);
    }

    let analytic = cost_report(cfg, sp, run.epochs, train.len());
    if !opts.no_outputs {
        let dir = &run.out_dir;
        write_file(&dir.join("subset_log.txt"), &(subset_log.join("\n") + "\n"))?;
        tracker.write_csv(&dir.join("examples_stats.csv"))?;
        checkpoint::save(&model, &dir.join("checkpoint.bin"))?;
        let cost = RunCost {
            analytic: &analytic,
            instrumented_training_forward_macs: training_macs,
        };
        write_file(&dir.join("cost_report.json"), &serde_json::to_string_pretty(&cost)?)?;
        write_file(&dir.join("config.json"), &serde_json::to_string_pretty(run)?)?;
    }
    Ok(RunSummary {
        final_val_acc: metrics.last().map_or(0.0, |m| m.val_acc),
        metrics,
        training_macs,
        subset_log,
        analytic,
        out_dir: run.out_dir.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub examples: usize,
}

/// Test-split accuracy of a saved checkpoint. A sparsity override is
/// applied at its final (post-warm-up) ratios.
pub fn evaluate_checkpoint(
    path: &Path,
    dataset: &DatasetKind,
    data_dir: &Path,
    sparsity: Option<&SparsityConfig>,
    batch_size: usize,
    threads: Option<usize>,
) -> Result<EvalReport> {
    let (cfg, dtype) = checkpoint::read_header(path)?;
    if let Some(sp) = sparsity {
        sp.validate(cfg.depth)
            .map_err(|e| CoreError::Incompatible(e.to_string()))?;
    }
    let (_, test) = load_dataset(dataset, data_dir, cfg.channels, cfg.image_size)?;
    if test.channels != cfg.channels || test.size != cfg.image_size || test.classes != cfg.num_classes {
        return Err(CoreError::Incompatible(format!(
            "dataset geometry {}x{}x{} ({} classes) does not fit the checkpoint model",
            test.channels, test.size, test.size, test.classes
        )));
    }
    let epoch = sparsity.map_or(0, |s| s.rt_warmup_epochs);
    let threads = threads.unwrap_or_else(threads_from_env);
    let accuracy = with_threads(threads, || match dtype.as_str() {
        "f32" => evaluate(&checkpoint::load::<f32>(path)?, &test, sparsity, epoch, batch_size),
        "f64" => evaluate(&checkpoint::load::<f64>(path)?, &test, sparsity, epoch, batch_size),
        other => Err(CoreError::Incompatible(format!("unknown dtype `{other}`"))),
    })?;
    Ok(EvalReport {
        accuracy,
        examples: test.len(),
    })
}
