//! Minibatch SGD with metric logging.
//!
//! Every iteration runs forward, softmax cross-entropy, backward and one
//! optimizer step on the whole network. Rank-1 conv layers recompose their
//! filters at the start of every forward pass and take projected steps on
//! their factors.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{softmax_xent, ConvMode};
use crate::network::{Network, NetworkSpec, ParamReport};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: ConvMode,
    /// Evaluate on the test set every this many iterations; 0 evaluates only
    /// at the end of each epoch.
    pub eval_every: usize,
    /// Single worker thread and no wall-clock column, so metric logs are
    /// byte-identical across runs.
    pub deterministic: bool,
    /// Heavy-ball momentum (0 for plain SGD).
    pub momentum: f64,
    /// Worker thread cap when not deterministic; `None` uses every core.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            mode: ConvMode::Rank1,
            eval_every: 0,
            deterministic: true,
            momentum: 0.0,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive and finite",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidArgument("thread count must be positive".into()));
        }
        Ok(())
    }

    fn worker_threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.unwrap_or(0)
        }
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    /// 1-based, counted across epochs.
    pub iteration: usize,
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub test_accuracy: Option<f64>,
    /// Milliseconds since training started; absent in deterministic mode.
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub metrics: Vec<MetricRecord>,
    pub params: ParamReport,
    pub mode: ConvMode,
    pub epochs_completed: usize,
}

impl TrainRun {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.metrics.iter().rev().find_map(|m| m.test_accuracy)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "epoch", "loss", "test_accuracy", "wall_ms"])?;
        for m in &self.metrics {
            w.write_record([
                m.iteration.to_string(),
                m.epoch.to_string(),
                format!("{:.17e}", m.loss),
                m.test_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
                m.wall_ms.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// What a step hook sees after each optimizer step.
pub struct StepInfo<'a> {
    pub iteration: usize,
    pub epoch: usize,
    pub loss: f64,
    pub network: &'a Network,
}

/// Builds a network from `spec` (initialised from `cfg.seed`) and trains it.
pub fn train(spec: &NetworkSpec, train_data: &Dataset, test_data: Option<&Dataset>, cfg: &TrainConfig) -> Result<(Network, TrainRun)> {
    let mut network = Network::new(spec, cfg.mode, cfg.seed)?;
    let run = train_network(&mut network, train_data, test_data, cfg, |_| Ok(()))?;
    Ok((network, run))
}

/// Trains `network` in place, calling `hook` after every optimizer step.
/// An error from the hook aborts training.
pub fn train_network<F>(
    network: &mut Network,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
    hook: F,
) -> Result<TrainRun>
where
    F: FnMut(&StepInfo<'_>) -> Result<()> + Send,
{
    cfg.validate()?;
    if network.mode() != cfg.mode {
        return Err(Error::InvalidArgument(format!(
            "network is in {} mode but the config asks for {}",
            network.mode().as_str(),
            cfg.mode.as_str()
        )));
    }
    let input = network.spec().input;
    if train_data.sample_shape() != input {
        return Err(Error::Shape(format!(
            "network input is {:?} but training samples are {:?}",
            input,
            train_data.sample_shape()
        )));
    }
    if train_data.classes() > network.classes() {
        return Err(Error::Shape(format!(
            "training data has {} classes but the network outputs {}",
            train_data.classes(),
            network.classes()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_threads())
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker threads: {e}")))?;
    pool.install(|| run_loop(network, train_data, test_data, cfg, hook))
}

fn run_loop<F>(
    network: &mut Network,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
    mut hook: F,
) -> Result<TrainRun>
where
    F: FnMut(&StepInfo<'_>) -> Result<()>,
{
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut iteration = 0;
    for epoch in 1..=cfg.epochs {
        let shuffle = cfg.seed.wrapping_add(epoch as u64);
        let batches = train_data.batches(cfg.batch_size, Some(shuffle))?;
        let last = batches.len();
        for (b, (x, y)) in batches.enumerate() {
            iteration += 1;
            let logits = network.forward(&x, true)?;
            let (loss, dlogits) = softmax_xent(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { iteration, epoch, loss });
            }
            network.backward(&dlogits)?;
            network.step(cfg.learning_rate, cfg.momentum)?;
            hook(&StepInfo {
                iteration,
                epoch,
                loss,
                network,
            })?;

            let due = (cfg.eval_every > 0 && iteration % cfg.eval_every == 0) || b + 1 == last;
            let test_accuracy = match test_data {
                Some(t) if due => Some(evaluate(network, t)?),
                _ => None,
            };
            metrics.push(MetricRecord {
                iteration,
                epoch,
                loss,
                test_accuracy,
                wall_ms: (!cfg.deterministic).then(|| start.elapsed().as_millis() as u64),
            });
        }
    }
    Ok(TrainRun {
        metrics,
        params: network.param_report(),
        mode: network.mode(),
        epochs_completed: cfg.epochs,
    })
}

const EVAL_BATCH: usize = 250;

/// Fraction of samples whose argmax prediction matches the label, computed
/// in evaluation mode.
pub fn evaluate(network: &mut Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let mut correct = 0;
    for (x, y) in data.batches(EVAL_BATCH, None)? {
        let pred = network.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
