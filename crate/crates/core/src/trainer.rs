//! Continual training loop and evaluation sweep.
//!
//! Tasks are trained in order with plain minibatch SGD. Under an EMA policy
//! the EMA state is stepped after every optimizer update; at the end of each
//! task its parameters become the checkpoint that is evaluated on every task
//! seen so far, and (with `handoff`) the live parameters restart from it.

use std::path::Path;

use crate::ema::{BetaMode, BetaReduction, BetaTrace, EmaState, DEFAULT_CLAMP};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, AccuracyMatrix, Unit};
use crate::net::{Activation, Model, NetSpec};
use crate::params::ParamVector;
use crate::seed;
use crate::tasks::{self, Sample, TaskConfig, TaskSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    /// SGD only.
    Plain,
    /// SGD plus an EMA with a constant weight.
    FixedEma(f64),
    /// SGD plus an EMA with the layer-wise dynamic weight.
    Dynamic,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Plain => "plain",
            Policy::FixedEma(_) => "fixed",
            Policy::Dynamic => "llaca",
        }
    }

    pub fn uses_ema(&self) -> bool {
        !matches!(self, Policy::Plain)
    }
}

/// Which parameters fill the accuracy matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalTarget {
    /// EMA parameters under EMA policies, live parameters under `Plain`.
    #[default]
    Deployed,
    /// Always the live (SGD) parameters.
    Live,
    /// Deployed in the main matrix, live in `live_accuracy_matrix`.
    Both,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tasks: TaskConfig,
    pub net: NetSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_per_task: usize,
    pub policy: Policy,
    pub clamp_value: f64,
    pub reduction: BetaReduction,
    pub eval: EvalTarget,
    /// Restart live parameters from the EMA checkpoint at each task boundary.
    pub handoff: bool,
    pub run_seed: u64,
}

pub const DEFAULT_HIDDEN: usize = 32;

impl Default for RunConfig {
    fn default() -> Self {
        let tasks = TaskConfig::default();
        let net = NetSpec {
            layer_sizes: vec![tasks.input_dim, DEFAULT_HIDDEN, tasks.output_classes()],
            activation: Activation::Relu,
            init_seed: 0,
        };
        Self {
            tasks,
            net,
            lr: 0.05,
            batch_size: 16,
            epochs_per_task: 1,
            policy: Policy::Dynamic,
            clamp_value: DEFAULT_CLAMP,
            reduction: BetaReduction::NormRatio,
            eval: EvalTarget::Deployed,
            handoff: true,
            run_seed: 0,
        }
        .with_seed(0)
    }
}

impl RunConfig {
    /// Sets the run seed and derives the task and initialization seeds from it.
    pub fn with_seed(mut self, run_seed: u64) -> Self {
        self.run_seed = run_seed;
        self.tasks.seed = seed::derive(run_seed, 1);
        self.net.init_seed = seed::derive(run_seed, 2);
        self
    }

    pub fn with_policy(mut self, policy: Policy) -> Self {
        self.policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks.validate()?;
        self.net.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.net.input_dim() != self.tasks.input_dim {
            return bad(format!(
                "network input width {} but tasks have {} features",
                self.net.input_dim(),
                self.tasks.input_dim
            ));
        }
        if self.net.num_classes() != self.tasks.output_classes() {
            return bad(format!(
                "network has {} outputs but tasks need {}",
                self.net.num_classes(),
                self.tasks.output_classes()
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if self.batch_size == 0 || self.epochs_per_task == 0 {
            return bad("batch_size and epochs_per_task must be at least 1".into());
        }
        if !(self.clamp_value > 0.0 && self.clamp_value < 1.0) {
            return bad(format!("clamp value {} outside (0, 1)", self.clamp_value));
        }
        if let Policy::FixedEma(beta) = self.policy {
            if !(beta > 0.0 && beta <= 1.0) {
                return bad(format!("fixed EMA weight {beta} outside (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub accuracy_matrix: AccuracyMatrix,
    /// Filled only with [`EvalTarget::Both`].
    pub live_accuracy_matrix: Option<AccuracyMatrix>,
    pub beta_trace: BetaTrace,
    /// Deployed parameters at the end of each task.
    pub checkpoints: Vec<ParamVector>,
    /// Live parameters at the start of each task.
    pub task_start_params: Vec<ParamVector>,
    /// Minibatch losses per task.
    pub loss_curves: Vec<Vec<f64>>,
    pub total_iterations: usize,
}

/// Accuracy of `params` on the test split of tasks `0..=upto`.
pub fn evaluate_all(
    params: &ParamVector,
    spec: &NetSpec,
    tasks: &TaskSequence,
    upto: usize,
) -> Result<Vec<f64>> {
    if upto >= tasks.len() {
        return Err(Error::Dimension(format!(
            "cannot evaluate through task {upto} of {}",
            tasks.len()
        )));
    }
    let model = Model::from_params(spec.clone(), params.clone())?;
    tasks.tasks[..=upto]
        .iter()
        .map(|task| {
            let (inputs, labels) = split_batch(task.test.iter());
            model.accuracy(&inputs, &labels)
        })
        .collect()
}

fn split_batch<'a>(samples: impl Iterator<Item = &'a Sample>) -> (Vec<&'a [f64]>, Vec<usize>) {
    samples.map(|s| (s.features.as_slice(), s.label)).unzip()
}

pub fn train_continual(config: &RunConfig) -> Result<RunArtifacts> {
    config.validate()?;
    let sequence = tasks::generate(&config.tasks)?;
    let mut model = Model::init(config.net.clone())?;

    let mut ema = match config.policy {
        Policy::Plain => None,
        Policy::FixedEma(beta) => Some(
            EmaState::new(model.params())
                .with_clamp(config.clamp_value)?
                .with_mode(BetaMode::Fixed(beta))?,
        ),
        Policy::Dynamic => Some(
            EmaState::new(model.params())
                .with_clamp(config.clamp_value)?
                .with_reduction(config.reduction),
        ),
    };

    let mut deployed_rows = Vec::with_capacity(sequence.len());
    let mut live_rows = Vec::with_capacity(sequence.len());
    let mut beta_trace = BetaTrace::default();
    let mut checkpoints = Vec::with_capacity(sequence.len());
    let mut task_start_params = Vec::with_capacity(sequence.len());
    let mut loss_curves = Vec::with_capacity(sequence.len());
    let mut global_iteration = 0;

    for (t, task) in sequence.tasks.iter().enumerate() {
        task_start_params.push(model.params().clone());
        let mut losses = Vec::new();
        for epoch in 0..config.epochs_per_task {
            let epoch_seed = seed::derive(
                seed::derive(config.run_seed, 0xba7c_0000 + t as u64),
                epoch as u64,
            );
            for batch in tasks::batches(&task.train, config.batch_size, epoch_seed)? {
                let (inputs, labels) = split_batch(batch.into_iter());
                let (loss, grads) = model.loss_and_grad(&inputs, &labels)?;
                global_iteration += 1;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        task: t,
                        iteration: global_iteration,
                    });
                }
                model.sgd_step(&grads, config.lr)?;
                if let Some(ema) = ema.as_mut() {
                    let records = ema.step(model.params(), &grads)?;
                    beta_trace.extend(t, global_iteration, records);
                }
                losses.push(loss);
            }
        }
        loss_curves.push(losses);

        let live = model.params().clone();
        let deployed = match ema.as_mut() {
            Some(ema) => {
                let (checkpoint, next_init) = ema.finish_dataset();
                if config.handoff {
                    model.set_params(next_init)?;
                }
                checkpoint
            }
            None => live.clone(),
        };

        let deployed_row = match config.eval {
            EvalTarget::Live => evaluate_all(&live, &config.net, &sequence, t)?,
            _ => evaluate_all(&deployed, &config.net, &sequence, t)?,
        };
        deployed_rows.push(deployed_row);
        if config.eval == EvalTarget::Both {
            live_rows.push(evaluate_all(&live, &config.net, &sequence, t)?);
        }
        checkpoints.push(deployed);
    }

    Ok(RunArtifacts {
        accuracy_matrix: AccuracyMatrix::new(deployed_rows, Unit::Fraction)?,
        live_accuracy_matrix: if live_rows.is_empty() {
            None
        } else {
            Some(AccuracyMatrix::new(live_rows, Unit::Fraction)?)
        },
        beta_trace,
        checkpoints,
        task_start_params,
        loss_curves,
        total_iterations: global_iteration,
    })
}

impl RunArtifacts {
    /// Writes every artifact file into `dir`:
    /// `accuracy_matrix.csv`, `metrics.txt`, `metrics.csv`, `loss_curves.csv`,
    /// `checkpoints/task_{k}.ckpt`, plus `beta_trace.csv` and `beta_norms.csv`
    /// when a trace exists and `live_accuracy_matrix.csv` when evaluated.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("checkpoints"))?;

        self.accuracy_matrix
            .save_csv(dir.join("accuracy_matrix.csv"))?;
        let report = compute_metrics(&self.accuracy_matrix);
        std::fs::write(dir.join("metrics.txt"), report.to_key_value())?;
        report.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;

        if let Some(live) = &self.live_accuracy_matrix {
            live.save_csv(dir.join("live_accuracy_matrix.csv"))?;
        }
        if !self.beta_trace.is_empty() {
            self.beta_trace.save_csv(dir.join("beta_trace.csv"))?;
            self.beta_trace.save_norms_csv(dir.join("beta_norms.csv"))?;
        }
        for (k, ckpt) in self.checkpoints.iter().enumerate() {
            ckpt.save(dir.join("checkpoints").join(format!("task_{}.ckpt", k + 1)))?;
        }

        let mut w = csv::Writer::from_path(dir.join("loss_curves.csv"))?;
        w.write_record(["task", "iteration", "loss"])?;
        for (k, curve) in self.loss_curves.iter().enumerate() {
            for (i, loss) in curve.iter().enumerate() {
                w.write_record([(k + 1).to_string(), (i + 1).to_string(), loss.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
