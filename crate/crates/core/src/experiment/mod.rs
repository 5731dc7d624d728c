//! Training loop, evaluation and the per-epoch experiment driver.

mod config;
pub mod metrics;

use std::time::Instant;

use log::info;

use crate::autograd::Graph;
use crate::backbone::{ForwardOptions, WideResNet};
use crate::checkpoint;
use crate::controller::ControllerState;
use crate::data::{self, Cifar10Set};
use crate::error::{Error, Result};
use crate::layers::{KeepRatio, SiteStats};
use crate::optimizer::{CosineSchedule, SgdNesterov};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use config::ExperimentConfig;
pub use metrics::{EpochRecord, MetricsTable, MetricsWriter, RunSummary};

/// Nonzero-rate bookkeeping accumulated over many batches, one entry per site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparsityReport {
    pub sites: Vec<SiteStats>,
}

impl SparsityReport {
    fn absorb(&mut self, batch: &[SiteStats]) {
        if self.sites.is_empty() {
            self.sites = batch.to_vec();
        } else {
            self.sites.iter_mut().zip(batch).for_each(|(acc, s)| acc.merge(s));
        }
    }

    pub fn site_rates(&self) -> Vec<f64> {
        self.sites.iter().map(SiteStats::rate).collect()
    }

    /// Unweighted mean of the per-site actual nonzero rates.
    pub fn mean_rate(&self) -> f64 {
        if self.sites.is_empty() {
            return 0.0;
        }
        self.site_rates().iter().sum::<f64>() / self.sites.len() as f64
    }

    /// Mean over sites of the nominal bound `ceil(r·D)/D`.
    pub fn mean_budget(&self) -> f64 {
        if self.sites.is_empty() {
            return 0.0;
        }
        self.sites.iter().map(|s| s.budget as f64 / s.per_sample as f64).sum::<f64>() / self.sites.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub accuracy: f64,
    pub loss: f64,
    pub sparsity: SparsityReport,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits.data().chunks_exact(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// One pass over `batches` with a fixed keep ratio and learning rate.
///
/// Accuracy is the running training accuracy: each batch is scored with the
/// parameters in place just before its own update.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch<T: Scalar>(
    model: &mut WideResNet<T>,
    optimizer: &mut SgdNesterov<T>,
    train: &Cifar10Set<T>,
    batches: &[Vec<usize>],
    r: KeepRatio,
    lr: f64,
    epoch: usize,
) -> Result<TrainStats> {
    if batches.is_empty() || batches.iter().all(Vec::is_empty) {
        return Err(Error::Input("cannot train an epoch with no batches".into()));
    }
    let (mut correct, mut seen, mut loss_sum) = (0usize, 0usize, 0.0f64);
    let mut sparsity = SparsityReport::default();
    for (bi, indices) in batches.iter().enumerate() {
        let (images, labels) = train.batch(indices);
        let diverged = |loss: f64| Error::Diverged { epoch, batch: bi, loss };
        let mut g = Graph::new();
        let bindings = model.params.bind(&mut g);
        let x = g.leaf(images);
        let (logits, report) = match model.forward(&mut g, &bindings, x, ForwardOptions::topk(r)) {
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            other => other?,
        };
        let loss = match g.softmax_cross_entropy(logits, &labels) {
            Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            other => other?,
        };
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(diverged(loss_value));
        }
        correct += count_correct(g.value(logits), &labels);
        seen += labels.len();
        loss_sum += loss_value * labels.len() as f64;
        sparsity.absorb(&report.sites);

        g.backward(loss)?;
        model.params.zero_grad();
        model.params.accumulate_grads(&g, &bindings)?;
        drop(g);
        optimizer.step(&mut model.params, lr)?;
    }
    Ok(TrainStats { accuracy: correct as f64 / seen as f64, loss: loss_sum / seen as f64, sparsity })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub accuracy: f64,
    pub sparsity: SparsityReport,
}

/// Test accuracy at keep ratio `r`, iterating the set in file order.
pub fn evaluate<T: Scalar>(model: &WideResNet<T>, set: &Cifar10Set<T>, r: KeepRatio, batch_size: usize) -> Result<EvalStats> {
    if set.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let mut correct = 0;
    let mut sparsity = SparsityReport::default();
    for indices in data::sequential_batches(set.len(), batch_size) {
        let (images, labels) = set.batch(&indices);
        let (logits, report) = model.predict(images, ForwardOptions::topk(r))?;
        correct += count_correct(&logits, &labels);
        sparsity.absorb(&report.sites);
    }
    Ok(EvalStats { accuracy: correct as f64 / set.len() as f64, sparsity })
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub records: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub resets: usize,
}

/// Loads CIFAR-10 from `config.data_dir` and runs the experiment.
pub fn run_experiment<T: Scalar>(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let (train, test) = data::load_cifar10::<T>(&config.data_dir)?;
    run_with_data(config, train, test)
}

/// Runs the experiment on already-loaded splits (subsets are applied here).
pub fn run_with_data<T: Scalar>(
    config: &ExperimentConfig,
    train: Cifar10Set<T>,
    test: Cifar10Set<T>,
) -> Result<ExperimentOutcome> {
    config.validate()?;
    let train = match config.subset {
        Some(n) => train.subset(n),
        None => train,
    };
    let test = match config.test_subset {
        Some(n) => test.subset(n),
        None => test,
    };
    let mut model = WideResNet::<T>::build(config.model, config.seed)?;
    let mut optimizer = SgdNesterov::new(&model.params, config.momentum)?;
    let schedule = CosineSchedule::new(config.base_lr, config.epochs)?;
    let mut controller = ControllerState::new(config.strategy.default_policy(), config.r_min)?;
    let mut writer = MetricsWriter::create(&config.metrics_path)?;
    info!(
        "{} run: WRN-{}-{}, {} params, {} sites, {} train / {} test images",
        config.strategy,
        config.model.depth,
        config.model.widen_factor,
        model.params.num_scalars(),
        model.count_sparsity_sites(),
        train.len(),
        test.len()
    );

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize)> = None;
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let r = controller.keep_ratio();
        let lr = schedule.lr_at(epoch)?;
        let batches = data::epoch_batches(train.len(), config.batch_size, config.seed, epoch);
        let stats = train_epoch(&mut model, &mut optimizer, &train, &batches, r, lr, epoch)?;
        let eval = evaluate(&model, &test, r, config.eval_batch_size)?;
        let dense = if !config.eval_dense {
            None
        } else if r == KeepRatio::DENSE {
            Some(eval.accuracy)
        } else {
            Some(evaluate(&model, &test, KeepRatio::DENSE, config.eval_batch_size)?.accuracy)
        };
        let outcome = controller.step(stats.accuracy)?;
        let record = EpochRecord {
            epoch,
            lr,
            keep_ratio: r.get(),
            train_accuracy: stats.accuracy,
            train_loss: stats.loss,
            test_accuracy: eval.accuracy,
            test_accuracy_dense: dense,
            mean_nonzero_rate: stats.sparsity.mean_rate(),
            site_nonzero_rates: stats.sparsity.site_rates(),
            reset: outcome.reset,
            seconds: started.elapsed().as_secs_f64(),
        };
        writer.append(&record)?;
        if best.is_none_or(|(acc, _)| eval.accuracy > acc) {
            best = Some((eval.accuracy, epoch));
            if let Some(path) = &config.checkpoint_path {
                checkpoint::save(&model.params, path)?;
            }
        }
        info!(
            "epoch {epoch:>4} r={:.4} lr={:.5} train_acc={:.4} loss={:.4} test_acc={:.4} nz={:.4}{} ({:.1}s)",
            record.keep_ratio,
            lr,
            record.train_accuracy,
            record.train_loss,
            record.test_accuracy,
            record.mean_nonzero_rate,
            if record.reset { " reset" } else { "" },
            record.seconds
        );
        records.push(record);
    }
    let (best_test_accuracy, best_epoch) = best.expect("at least one epoch");
    let summary = RunSummary {
        best_test_accuracy,
        best_epoch,
        final_test_accuracy: records.last().map(|r| r.test_accuracy).unwrap_or_default(),
    };
    writer.finish(&summary)?;
    Ok(ExperimentOutcome { records, summary, resets: controller.reset_count() })
}
